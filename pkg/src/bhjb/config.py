"""Run configuration and problem files.

A problem file is JSON::

    {
      "name": "my-problem",
      "domain": {"lower": [0], "upper": [1]},          # or {"dimension": 1, "radius": 5}
      "horizon": 5.0,
      "grid": [200],
      "controls": [[-1], [1]],
      "z_dim": 1,
      "coefficients": {
        "drift": ["v"],
        "diffusion": [["0.5"]],
        "cost": "1",
        "bounds": {"drift": 1, "diffusion": 0.5, "cost": 1}
      },
      "initial_law": {"kind": "uniform"},              # or dirac / grid_density
      "tree": {...},                                   # optional inline tree
      "cordes": {"case": "auto", "bbar": [["1"]], "case_iii": {"indices": [1], "gammas": [1.0]}},
      "run": {"theta": 1.0, "N": 100000}               # optional RunConfig defaults
    }

``coefficients`` may instead be ``{"preset": "<name>"}`` to reuse a built-in
preset's coefficients.  Expressions use the grammar in :mod:`bhjb.expr`.
"""

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import presets
from .errors import ConfigError
from .expr import Expression, compile_matrix, compile_scalar, compile_vector
from .problem import CoefficientField, ControlProblem, ControlSet, InitialLaw, SpatialDomain
from .tree import ScenarioTree


@dataclass
class RunConfig:
    problem: str | None = None
    tree: str | None = None
    preset: str | None = None
    grid: list | None = None
    theta: float = 1.0
    policy_iter_tol: float = 1e-10
    max_policy_iters: int = 100
    seed: int = 0
    N: int = 100000
    substeps: int = 4
    out: str = "bhjb_out"
    threads: int = 1
    cordes_case: str = "auto"
    cordes_samples: int = 256
    override_cordes: bool = False
    dump_fields: bool = False
    policy: str | None = None

    def __post_init__(self):
        if self.grid is not None:
            self.grid = [int(g) for g in self.grid]
        self.validate()

    def validate(self):
        if self.preset is not None and self.problem is not None:
            raise ConfigError("choose either a preset or a problem file, not both", field="preset")
        if not (0.0 <= self.theta <= 1.0):
            raise ConfigError("theta must lie in [0, 1]", field="theta")
        if not (self.policy_iter_tol > 0 and math.isfinite(self.policy_iter_tol)):
            raise ConfigError("policy_iter_tol must be positive", field="policy_iter_tol")
        for name in ("max_policy_iters", "N", "substeps", "threads", "cordes_samples"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1", field=name)
        if self.cordes_case not in ("auto", "i", "ii", "iii", "skip"):
            raise ConfigError(f"unknown Cordes case {self.cordes_case!r}", field="cordes_case")
        if self.grid is not None and any(g < 3 for g in self.grid):
            raise ConfigError("grids need at least 3 nodes per axis", field="grid")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown run setting {sorted(extra)[0]!r}", field=sorted(extra)[0])
        return cls(**data)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(read_json(path, "config"))


def read_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{what} file {path} not found", field=what) from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} file {path} is not valid JSON: {exc}", field=what) from None


def _need(data, key, prefix=""):
    if key not in data:
        raise ConfigError(f"missing required field {prefix + key!r}", field=prefix + key)
    return data[key]


def _compile(kind, src, fieldname):
    try:
        if kind == "vector":
            return compile_vector(src)
        if kind == "matrix":
            return compile_matrix(src)
        return compile_scalar(src)
    except ConfigError as exc:
        raise ConfigError(f"{fieldname}: {exc}", field=fieldname) from None
    except TypeError:
        raise ConfigError(f"{fieldname} has the wrong shape", field=fieldname) from None


def parse_domain(d):
    if "radius" in d:
        return SpatialDomain.unbounded(int(_need(d, "dimension", "domain.")), float(d["radius"]))
    return SpatialDomain(_need(d, "lower", "domain."), _need(d, "upper", "domain."))


def parse_initial_law(d, dim):
    kind = d.get("kind", "uniform")
    if kind == "uniform":
        return InitialLaw.uniform()
    if kind == "dirac":
        pt = _need(d, "point", "initial_law.")
        if len(np.atleast_1d(pt)) != dim:
            raise ConfigError("dirac point dimension does not match the domain", field="initial_law.point")
        return InitialLaw.dirac_at(pt)
    if kind == "grid_density":
        if "values" in d:
            return InitialLaw("grid_density", values=np.asarray(d["values"], dtype=float), label="values")
        expr = Expression(_need(d, "density", "initial_law."))
        return InitialLaw("grid_density", density=lambda x: expr(x, 0.0, 0.0, 0.0), label=expr.source)
    raise ConfigError(f"unknown initial law kind {kind!r}", field="initial_law.kind")


def parse_problem(data):
    """``(ControlProblem, inline tree or None, cordes settings)`` from a problem dict."""
    domain = parse_domain(_need(data, "domain"))
    horizon = float(_need(data, "horizon"))
    n = domain.dimension
    coef_d = _need(data, "coefficients")
    if "preset" in coef_d:
        base_prob, _ = presets.preset(coef_d["preset"])
        coef = base_prob.coefficients
        controls = base_prob.controls if "controls" not in data else ControlSet(data["controls"])
    else:
        drift = _compile("vector", _need(coef_d, "drift", "coefficients."), "coefficients.drift")
        diffusion = _compile("matrix", _need(coef_d, "diffusion", "coefficients."), "coefficients.diffusion")
        cost = _compile("scalar", _need(coef_d, "cost", "coefficients."), "coefficients.cost")
        if len(drift.sources) != n or len(diffusion.sources) != n or any(len(r) != n for r in diffusion.sources):
            raise ConfigError(f"drift/diffusion shapes must match dimension {n}", field="coefficients")
        b = coef_d.get("bounds", {})
        coef = CoefficientField(drift, diffusion, cost, z_dim=int(data.get("z_dim", 1)),
                                drift_bound=float(b.get("drift", math.inf)),
                                diffusion_bound=float(b.get("diffusion", math.inf)),
                                cost_bound=float(b.get("cost", math.inf)))
        controls = ControlSet(_need(data, "controls"))
    law = parse_initial_law(data.get("initial_law", {"kind": "uniform"}), n)
    meta = {"grid": data.get("grid"), "source": "file"}
    prob = ControlProblem(domain, horizon, coef, controls, law, name=str(data.get("name", "")), meta=meta)
    tree = ScenarioTree.from_dict(data["tree"]) if "tree" in data else None
    return prob, tree, parse_cordes(data.get("cordes", {}), n)


def parse_cordes(d, n):
    out = {"case": d.get("case"), "bbar": None, "case_iii": None}
    if "bbar" in d:
        out["bbar"] = _compile("matrix", d["bbar"], "cordes.bbar")
    if "case_iii" in d:
        c = d["case_iii"]
        out["case_iii"] = (tuple(_need(c, "indices", "cordes.case_iii.")), tuple(_need(c, "gammas", "cordes.case_iii.")))
    return out


def load_problem(path):
    data = read_json(path, "problem")
    prob, tree, cordes = parse_problem(data)
    return prob, tree, cordes, data.get("run", {})


def default_tree(problem, levels=100):
    """A single chain with ``levels`` steps over the horizon and z = 0."""
    return ScenarioTree.uniform_chain(problem.horizon, levels, np.zeros(problem.coefficients.z_dim))
