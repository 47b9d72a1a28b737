"""CSV export/import of node-indexed fields.

Columns are ``k, node_id, i0[, i1], value``; one row per tree node and full
grid point, rows ordered by node then C-order grid index.
"""

import csv

import numpy as np

from .errors import ConfigError
from .fields import PolicyField


def _index_columns(ndim):
    return [f"i{j}" for j in range(ndim)]


def write_field_csv(path, values, tree, grid, fmt="{:.17g}"):
    values = np.asarray(values)
    idx = np.indices(grid.shape).reshape(grid.ndim, -1).T
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "node_id", *_index_columns(grid.ndim), "value"])
        for node in range(tree.n_nodes):
            flat = values[node].ravel()
            k = int(tree.level[node])
            nid = tree.ids[node]
            for row, v in zip(idx, flat):
                w.writerow([k, nid, *row.tolist(), fmt.format(v) if fmt else v])


def write_policy_csv(path, policy: PolicyField):
    write_field_csv(path, policy.indices, policy.tree, policy.grid, fmt="{:d}")


def read_field_csv(path, tree, grid, dtype=float):
    """Node-indexed full-grid array from a field CSV; every (node, point) must be present."""
    pos = {str(i): n for n, i in enumerate(tree.ids)}
    out = np.zeros((tree.n_nodes,) + tuple(grid.shape), dtype=dtype)
    seen = np.zeros(out.shape, dtype=bool)
    cols = _index_columns(grid.ndim)
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise ConfigError(f"field file {path} not found", field="policy") from None
    with fh:
        reader = csv.DictReader(fh)
        missing = {"k", "node_id", "value", *cols} - set(reader.fieldnames or [])
        if missing:
            raise ConfigError(f"field file {path} lacks column {sorted(missing)[0]!r}", field="policy")
        for row in reader:
            node = pos.get(row["node_id"])
            if node is None:
                raise ConfigError(f"field file names unknown node {row['node_id']!r}", field="policy")
            ix = tuple(int(row[c]) for c in cols)
            if any(not (0 <= i < s) for i, s in zip(ix, grid.shape)):
                raise ConfigError(f"grid index {ix} out of range for {grid.shape}", field="policy")
            out[(node,) + ix] = dtype(row["value"]) if dtype is not float else float(row["value"])
            seen[(node,) + ix] = True
    if not seen.all():
        raise ConfigError(f"field file {path} does not cover every node and grid point", field="policy")
    return out


def read_policy_csv(path, tree, grid, n_controls):
    idx = read_field_csv(path, tree, grid, dtype=np.int64)
    if idx.min() < 0 or idx.max() >= n_controls:
        raise ConfigError("policy file has control indices outside the control set", field="policy")
    return PolicyField(idx, tree, grid, n_controls)
