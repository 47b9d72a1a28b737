"""Scenario trees for the observed parameter process Z.

A tree is the only description of Z the solvers need: node values at the
levels of a time grid and transition probabilities from parent to child.
Z is held constant on ``[t_k, t_{k+1})`` at the value of the level-``k``
node, and no interpolation between levels is ever done.

Nodes are stored in an internal dense numbering (level-major, in file
order); the original ids survive in :attr:`ScenarioTree.ids`.  Node-indexed
data are arrays whose first axis runs over internal node indices.
"""

import json
from collections.abc import Mapping

import numpy as np

from .errors import ConfigError, IncompleteDataError
from .reports import ValidationReport

PROB_TOL = 1e-12


class ScenarioTree:
    def __init__(self, times, levels, z, parents, probs, ids=None, meta=None):
        times = np.asarray(times, dtype=float)
        levels = np.asarray(levels, dtype=np.int64)
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        parents = np.asarray(parents, dtype=np.int64)
        probs = np.asarray(probs, dtype=float)
        n = levels.size
        if not (z.shape[0] == parents.size == probs.size == n):
            raise ConfigError("tree node arrays have inconsistent lengths", field="tree.nodes")
        if ids is None:
            ids = list(range(n))
        order = np.argsort(levels, kind="stable")
        remap = np.empty(n, dtype=np.int64)
        remap[order] = np.arange(n)
        self.times = times
        self.level = levels[order]
        self.z = z[order]
        self.parent = np.where(parents[order] >= 0, remap[np.maximum(parents[order], 0)], -1)
        self.prob = probs[order]
        self.ids = [ids[i] for i in order]
        self.meta = dict(meta or {})
        self.n_levels = times.size - 1
        children = [[] for _ in range(n)]
        for i, p in enumerate(self.parent):
            if p >= 0:
                children[p].append(i)
        self.children = [np.asarray(c, dtype=np.int64) for c in children]
        self.by_level = [np.flatnonzero(self.level == k) for k in range(self.n_levels + 1)]
        roots = np.flatnonzero(self.parent < 0)
        self.root = int(roots[0]) if roots.size else -1
        self._path_prob = None

    # -- constructors ------------------------------------------------------

    @classmethod
    def chain(cls, times, z=0.0):
        """Deterministic Z: one node per level, all with the same value(s)."""
        times = np.asarray(times, dtype=float)
        K = times.size - 1
        z = np.atleast_1d(np.asarray(z, dtype=float))
        zz = np.tile(z, (K + 1, 1)) if z.ndim == 1 else z
        return cls(times, np.arange(K + 1), zz, np.arange(-1, K), np.ones(K + 1))

    @classmethod
    def uniform_chain(cls, horizon, levels, z=0.0):
        return cls.chain(np.linspace(0.0, horizon, levels + 1), z)

    @property
    def n_nodes(self):
        return self.level.size

    @property
    def z_dim(self):
        return self.z.shape[1]

    @property
    def leaves(self):
        return self.by_level[self.n_levels]

    def dt(self, k):
        return float(self.times[k + 1] - self.times[k])

    def path_probability(self):
        """Unconditional probability of reaching each node."""
        if self._path_prob is None:
            pp = np.zeros(self.n_nodes)
            for k, nodes in enumerate(self.by_level):
                for i in nodes:
                    pp[i] = 1.0 if self.parent[i] < 0 else pp[self.parent[i]] * self.prob[i]
            self._path_prob = pp
        return self._path_prob

    def ancestors(self, node):
        out = []
        while node >= 0:
            out.append(int(node))
            node = self.parent[node]
        return out[::-1]

    def is_trivial(self):
        return all(len(c) <= 1 for c in self.children)

    def size_signature(self):
        return (self.n_levels, self.n_nodes, tuple(len(b) for b in self.by_level))

    # -- serialization -----------------------------------------------------

    def to_dict(self):
        nodes = []
        for i in range(self.n_nodes):
            nodes.append({
                "id": self.ids[i],
                "k": int(self.level[i]),
                "z": self.z[i].tolist(),
                "parent": None if self.parent[i] < 0 else self.ids[self.parent[i]],
                "prob": float(self.prob[i]),
            })
        return {"times": self.times.tolist(), "nodes": nodes}

    @classmethod
    def from_dict(cls, data):
        if "times" not in data:
            raise ConfigError("tree file needs 'times'", field="tree.times")
        times = data["times"]
        if "markov" in data:
            mk = data["markov"]
            try:
                return from_markov_chain(
                    mk["states"], mk["transition"], len(times) - 1,
                    recombine=mk.get("recombine", False), times=times, initial_state=mk.get("initial", 0),
                )
            except KeyError as exc:
                raise ConfigError(f"markov shorthand missing {exc.args[0]!r}", field=f"tree.markov.{exc.args[0]}") from None
        if "nodes" not in data:
            raise ConfigError("tree file needs 'nodes' or 'markov'", field="tree.nodes")
        raw = data["nodes"]
        ids = [nd["id"] for nd in raw]
        if len(set(map(_key, ids))) != len(ids):
            raise ConfigError("duplicate node ids in tree", field="tree.nodes.id")
        pos = {_key(i): j for j, i in enumerate(ids)}
        parents = []
        for nd in raw:
            p = nd.get("parent")
            if p is None:
                parents.append(-1)
            elif _key(p) not in pos:
                raise ConfigError(f"node {nd['id']!r} has unknown parent {p!r}", field="tree.nodes.parent")
            else:
                parents.append(pos[_key(p)])
        levels = [int(nd["k"]) for nd in raw]
        z = [np.atleast_1d(np.asarray(nd.get("z", [0.0]), dtype=float)) for nd in raw]
        probs = [float(nd.get("prob", 1.0)) for nd in raw]
        return cls(times, levels, np.vstack(z), parents, probs, ids=ids)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"tree file {path} is not valid JSON: {exc}", field="tree") from None
        return cls.from_dict(data)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    def __repr__(self):
        return f"ScenarioTree(levels={self.n_levels}, nodes={self.n_nodes}, z_dim={self.z_dim})"


def _key(i):
    return str(i)


def validate_tree(tree: ScenarioTree):
    report = ValidationReport(subject="scenario tree")
    times = tree.times
    report.add("times_increasing", times.size >= 2 and bool(np.all(np.diff(times) > 0)) and times[0] == 0.0,
               message="need 0 = t_0 < t_1 < ... < t_K")
    roots = np.flatnonzero(tree.parent < 0)
    root_ok = roots.size == 1 and tree.level[roots[0]] == 0 and tree.by_level[0].size == 1
    report.add("unique_root", root_ok, witness={"roots": [tree.ids[r] for r in roots]})

    bad_level = [tree.ids[i] for i in range(tree.n_nodes)
                 if tree.parent[i] >= 0 and tree.level[i] != tree.level[tree.parent[i]] + 1]
    report.add("parent_levels", not bad_level, witness={"nodes": bad_level[:10]},
               message="child level must be parent level + 1")

    bad_sum = []
    worst = 0.0
    for i in range(tree.n_nodes):
        ch = tree.children[i]
        if ch.size:
            err = abs(tree.prob[ch].sum() - 1.0)
            worst = max(worst, err)
            if err > PROB_TOL:
                bad_sum.append(tree.ids[i])
    report.add("child_probabilities", not bad_sum, worst, witness={"nodes": bad_sum[:10]},
               message="children probabilities must sum to 1")

    neg = [tree.ids[i] for i in np.flatnonzero(tree.prob < 0)]
    report.add("nonnegative_probabilities", not neg, witness={"nodes": neg[:10]})

    early_leaves = [tree.ids[i] for i in range(tree.n_nodes)
                    if tree.children[i].size == 0 and tree.level[i] != tree.n_levels]
    over = [tree.ids[i] for i in np.flatnonzero((tree.level > tree.n_levels) | (tree.level < 0))]
    report.add("leaves_at_horizon", not early_leaves and not over, witness={"nodes": (early_leaves + over)[:10]},
               message=f"every leaf must sit at level K={tree.n_levels}")

    nonfinite = [tree.ids[i] for i in np.flatnonzero(~np.isfinite(tree.z).all(axis=1))]
    report.add("finite_z", not nonfinite, witness={"nodes": nonfinite[:10]})
    return report


def conditional_expectation(tree: ScenarioTree, values, node):
    """``E[values at level k+1 | node at level k]`` = sum_c p(c) * values(c).

    ``values`` is either a node-indexed array (first axis = internal node
    index) or a mapping from internal node index to arrays.
    """
    node = int(node)
    ch = tree.children[node]
    if tree.level[node] >= tree.n_levels or ch.size == 0:
        raise IncompleteDataError(f"node {tree.ids[node]!r} has no children to average over")
    if isinstance(values, Mapping):
        missing = [tree.ids[c] for c in ch if int(c) not in values]
        if missing:
            raise IncompleteDataError(f"missing values for children {missing} of node {tree.ids[node]!r}")
        items = [np.asarray(values[int(c)], dtype=float) for c in ch]
    else:
        values = np.asarray(values)
        items = [values[c] for c in ch]
    out = tree.prob[ch[0]] * items[0]
    for c, item in zip(ch[1:], items[1:]):
        out = out + tree.prob[c] * item
    return out


def sample_path(tree: ScenarioTree, rng):
    """One root-to-leaf path of internal node indices."""
    node = tree.root
    path = [node]
    while tree.children[node].size:
        ch = tree.children[node]
        if ch.size == 1:
            node = int(ch[0])
        else:
            cdf = np.cumsum(tree.prob[ch])
            j = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            node = int(ch[min(j, ch.size - 1)])
        path.append(node)
    return path


def sample_paths(tree: ScenarioTree, rng, count):
    """``count`` independent paths as an array ``(count, K+1)`` of node indices.

    One uniform per path per branching level is consumed regardless of the
    branching pattern, so draws stay aligned with path indices.
    """
    out = np.empty((count, tree.n_levels + 1), dtype=np.int64)
    out[:, 0] = tree.root
    for k in range(tree.n_levels):
        cur = out[:, k]
        branching = [n for n in tree.by_level[k] if tree.children[n].size > 1]
        u = rng.random(count) if branching else None
        nxt = np.empty(count, dtype=np.int64)
        for n in tree.by_level[k]:
            mask = cur == n
            if not mask.any():
                continue
            ch = tree.children[n]
            if ch.size == 1:
                nxt[mask] = ch[0]
            else:
                cdf = np.cumsum(tree.prob[ch])
                j = np.searchsorted(cdf, u[mask] * cdf[-1], side="right")
                nxt[mask] = ch[np.minimum(j, ch.size - 1)]
        out[:, k + 1] = nxt
    return out


def from_markov_chain(states, transition, K, recombine=False, times=None, initial_state=0):
    """Expand a finite Markov chain into a scenario tree with ``K`` levels.

    Transitions with zero probability are dropped.  With ``recombine`` the
    tree has the same topology but every node records its chain state in
    ``tree.meta["state"]``, so nodes that a recombining lattice would merge
    share their state index and z-value.
    """
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    P = np.asarray(transition, dtype=float)
    S = states.shape[0]
    if P.shape != (S, S):
        raise ConfigError(f"transition matrix must be {S}x{S}", field="tree.markov.transition")
    if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > PROB_TOL):
        raise ConfigError("transition matrix is not row-stochastic", field="tree.markov.transition")
    if times is None:
        times = np.arange(K + 1, dtype=float)
    if len(times) != K + 1:
        raise ConfigError("times must have K+1 entries", field="tree.times")
    levels, zs, parents, probs, st = [0], [states[initial_state]], [-1], [1.0], [initial_state]
    frontier = [0]
    for k in range(K):
        nxt = []
        for node in frontier:
            s = st[node]
            for s2 in range(S):
                if P[s, s2] > 0:
                    levels.append(k + 1)
                    zs.append(states[s2])
                    parents.append(node)
                    probs.append(P[s, s2])
                    st.append(s2)
                    nxt.append(len(levels) - 1)
        frontier = nxt
    meta = {"state": None}
    tree = ScenarioTree(times, levels, np.vstack(zs), parents, probs, meta=meta)
    # internal order is level-major in creation order, so it matches ``st``
    tree.meta["state"] = np.asarray(st) if recombine else None
    tree.meta["recombine"] = bool(recombine)
    return tree
