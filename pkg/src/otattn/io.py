"""Plain-text cost/plan files and JSON checkpoints."""
from __future__ import annotations

import json
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .mesh import MeshConfig
from .ot import Marginals, SinkhornConfig
from .slot_attention import SAConfig


class ParseError(ValueError):
    def __init__(self, msg: str, line: int, column: int, path=None):
        where = f"{path}:" if path else ""
        super().__init__(f"{where}{line}:{column}: {msg}")
        self.line = line
        self.column = column


def _floats(text: str, lineno: int, path) -> list[float]:
    out = []
    col = 1
    for tok in text.split():
        col = text.index(tok, col - 1) + 1
        try:
            out.append(float(tok))
        except ValueError:
            raise ParseError(f"expected a real number, got {tok!r}", lineno, col, path) from None
        col += len(tok)
    return out


def parse_problem(text: str, path=None) -> tuple[np.ndarray, Marginals | None]:
    """Parse ``m n``, then ``m`` cost rows, then optionally the two marginal lines.

    Blank lines and ``#`` comments are ignored.  Without marginal lines the
    unit marginals are implied and ``None`` is returned for them.
    """
    lines = [(i + 1, ln.split("#", 1)[0]) for i, ln in enumerate(text.splitlines())]
    lines = [(i, ln) for i, ln in lines if ln.strip()]
    if not lines:
        raise ParseError("empty problem file", 1, 1, path)
    lineno, header = lines[0]
    dims = header.split()
    if len(dims) != 2:
        raise ParseError("header must be 'm n'", lineno, 1, path)
    try:
        m, n = int(dims[0]), int(dims[1])
    except ValueError:
        raise ParseError("header must hold two integers", lineno, 1, path) from None
    if m < 1 or n < 1:
        raise ParseError("dimensions must be positive", lineno, 1, path)
    body = lines[1:]
    if len(body) not in (m, m + 2):
        last = body[-1][0] if body else lineno
        raise ParseError(f"expected {m} cost rows and optionally 2 marginal lines, found {len(body)} lines",
                         last, 1, path)
    C = np.empty((m, n))
    for r, (ln, txt) in enumerate(body[:m]):
        vals = _floats(txt, ln, path)
        if len(vals) != n:
            raise ParseError(f"expected {n} values, found {len(vals)}", ln, len(txt.rstrip()) + 1, path)
        C[r] = vals
    marg = None
    if len(body) == m + 2:
        (la, ta), (lb, tb) = body[m], body[m + 1]
        a, b = _floats(ta, la, path), _floats(tb, lb, path)
        if len(a) != m:
            raise ParseError(f"row marginal needs {m} values, found {len(a)}", la, 1, path)
        if len(b) != n:
            raise ParseError(f"column marginal needs {n} values, found {len(b)}", lb, 1, path)
        marg = Marginals(np.array(a), np.array(b))
    return C, marg


def read_problem(path) -> tuple[np.ndarray, Marginals | None]:
    path = Path(path)
    return parse_problem(path.read_text(), path)


def format_matrix(M: np.ndarray) -> str:
    M = np.asarray(M, dtype=np.float64)
    rows = [" ".join(repr(float(x)) for x in row) for row in M]
    return f"{M.shape[0]} {M.shape[1]}\n" + "\n".join(rows) + "\n"


def write_problem(path, C: np.ndarray, marg: Marginals | None = None) -> None:
    text = format_matrix(C)
    if marg is not None:
        text += " ".join(repr(float(x)) for x in marg.a.data) + "\n"
        text += " ".join(repr(float(x)) for x in marg.b.data) + "\n"
    Path(path).write_text(text)


def write_plan(path, P: np.ndarray) -> None:
    """Plan file: same layout as a cost file; floats are written with ``repr`` so they read back exactly."""
    Path(path).write_text(format_matrix(P))


def read_plan(path) -> np.ndarray:
    P, marg = read_problem(path)
    if marg is not None:
        raise ParseError("plan files carry no marginal lines", 1, 1, path)
    return P


# ---------------------------------------------------------------------------
# configs and checkpoints
# ---------------------------------------------------------------------------

def _mesh_to_dict(cfg: MeshConfig) -> dict:
    d = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    d["inner"] = asdict(cfg.inner)
    d["outer"] = asdict(cfg.outer)
    if cfg.similarity is not None:
        d["similarity"] = np.asarray(cfg.similarity).tolist()
    return d


def _mesh_from_dict(d: dict) -> MeshConfig:
    d = dict(d)
    d["inner"] = SinkhornConfig(**d.get("inner", {}))
    d["outer"] = SinkhornConfig(**d.get("outer", {}))
    if d.get("similarity") is not None:
        d["similarity"] = np.asarray(d["similarity"], dtype=np.float64)
    return MeshConfig(**d)


def sa_config_to_dict(cfg: SAConfig) -> dict:
    d = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    d["mesh"] = _mesh_to_dict(cfg.mesh)
    d["sinkhorn"] = asdict(cfg.sinkhorn)
    return d


def sa_config_from_dict(d: dict) -> SAConfig:
    d = dict(d)
    if "mesh" in d:
        d["mesh"] = _mesh_from_dict(d["mesh"])
    if "sinkhorn" in d:
        d["sinkhorn"] = SinkhornConfig(**d["sinkhorn"])
    return SAConfig(**d)


def save_checkpoint(path, params: dict, cfg: SAConfig, seed: int, extra: dict | None = None) -> None:
    """JSON document: ``params`` as ``{name: {shape, data}}``, the model config and the seed."""
    doc = {
        "params": {k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
                   for k, v in params.items()},
        "config": sa_config_to_dict(cfg),
        "seed": int(seed),
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[dict, SAConfig, int]:
    doc = json.loads(Path(path).read_text())
    params = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}
    return params, sa_config_from_dict(doc["config"]), int(doc["seed"])
