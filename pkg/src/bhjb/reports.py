"""Pass/fail check reports shared by problem and tree validation."""

from dataclasses import dataclass, field

from .errors import ValidationFailed


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float | None = None
    witness: dict | None = None
    message: str = ""

    def to_dict(self):
        return {
            "name": self.name,
            "passed": bool(self.passed),
            "value": None if self.value is None else float(self.value),
            "witness": _jsonable(self.witness),
            "message": self.message,
        }


@dataclass
class ValidationReport:
    subject: str
    checks: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def add(self, name, passed, value=None, witness=None, message=""):
        self.checks.append(CheckResult(name, bool(passed), value, witness, message))

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    @property
    def failures(self):
        return [c for c in self.checks if not c.passed]

    def check(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def raise_if_failed(self):
        if not self.passed:
            names = ", ".join(f"{c.name} ({c.message})" if c.message else c.name for c in self.failures)
            raise ValidationFailed(f"{self.subject} rejected: {names}", report=self)
        return self

    def to_dict(self):
        return {
            "subject": self.subject,
            "passed": self.passed,
            "checks": [c.to_dict() for c in self.checks],
            "notes": list(self.notes),
        }

    def summary(self):
        lines = [f"{self.subject}: {'PASS' if self.passed else 'FAIL'}"]
        for c in self.checks:
            tag = "ok  " if c.passed else "FAIL"
            extra = f" value={c.value:.6g}" if c.value is not None else ""
            wit = f" witness={_jsonable(c.witness)}" if c.witness and not c.passed else ""
            msg = f" {c.message}" if c.message else ""
            lines.append(f"  [{tag}] {c.name}{extra}{msg}{wit}")
        for note in self.notes:
            lines.append(f"  note: {note}")
        return "\n".join(lines)


def _jsonable(obj):
    import numpy as np

    if obj is None:
        return None
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
