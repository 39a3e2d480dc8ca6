"""Additive covariance functions over heterogeneous covariates.

A prior is a sum of terms. Each term reads one covariate (``se``, ``ca``,
``bi``) or a product of them (``ca_x_se`` ...). Every term carries its own
output scale; the factors inside a product are evaluated with unit scale.
A term evaluates to exactly zero whenever one of the covariates it reads is
missing in either row.

Terms that contain a categorical factor on the instance identifier are
block diagonal over instances. They form the structured part ``Sigma_hat``;
all other terms form the low-rank candidate part ``K_A``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .linalg import robust_cholesky

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"
BINARY = "binary"
KINDS = (CONTINUOUS, CATEGORICAL, BINARY)

SE, CAT, BIN, INTERACTION = "SE", "CAT", "BIN", "INTERACTION"
_FACTOR_KINDS = {"se": SE, "ca": CAT, "bi": BIN}

NOISE_VARIANCE = 1.0
MAX_GRAM_ENTRIES = 50_000_000
DEFAULT_DENSE_CAP = 5000


# ---------------------------------------------------------------------------
# covariates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CovariateSchema:
    """Names and kinds of the covariate columns plus the instance id column."""

    names: tuple[str, ...]
    kinds: tuple[str, ...]
    id_index: int = 0

    def __post_init__(self):
        if len(self.names) != len(self.kinds):
            raise ValueError("names and kinds differ in length")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"covariate names must be unique: {self.names}")
        for k in self.kinds:
            if k not in KINDS:
                raise ValueError(f"unknown covariate kind {k!r}")
        if not 0 <= self.id_index < len(self.names):
            raise ValueError("id_index out of range")
        if self.kinds[self.id_index] != CATEGORICAL:
            raise ValueError("the instance id covariate must be categorical")

    @classmethod
    def from_pairs(cls, entries: Sequence[tuple[str, str]], id_name: str = "id"):
        names = tuple(n for n, _ in entries)
        kinds = tuple(k for _, k in entries)
        if id_name not in names:
            raise ValueError(f"id covariate {id_name!r} not in schema")
        return cls(names, kinds, names.index(id_name))

    @property
    def q(self) -> int:
        return len(self.names)

    @property
    def id_name(self) -> str:
        return self.names[self.id_index]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown covariate {name!r}; schema has {self.names}") from None


HEALTH_SCHEMA = CovariateSchema.from_pairs(
    [
        ("id", CATEGORICAL),
        ("age", CONTINUOUS),
        ("sex", CATEGORICAL),
        ("diseasePresence", BINARY),
        ("diseaseAge", CONTINUOUS),
        ("location", BINARY),
    ]
)


class CovariateMatrix:
    """N x Q covariates with per-entry presence flags.

    Missing entries are stored as 0.0 in ``values`` and ``False`` in
    ``present``. Rows of one instance must be contiguous; ``instance_blocks``
    lists ``(id, start, stop)`` in row order.

    ``require_id=False`` builds an unvalidated row set (used for inducing
    locations, whose id column is irrelevant).
    """

    def __init__(self, schema: CovariateSchema, values, present=None, require_id: bool = True):
        v = torch.as_tensor(np.asarray(values, dtype=np.float64) if not torch.is_tensor(values) else values)
        v = v.to(torch.float64)
        if v.dim() != 2 or v.shape[1] != schema.q:
            raise ValueError(f"covariate matrix must be N x {schema.q}, got {tuple(v.shape)}")
        if present is None:
            present = ~torch.isnan(v)
        else:
            present = torch.as_tensor(present, dtype=torch.bool)
            if present.shape != v.shape:
                raise ValueError("present mask shape mismatch")
        self.schema = schema
        self.present = present
        self.values = torch.where(present, torch.nan_to_num(v, nan=0.0), torch.zeros((), dtype=torch.float64))
        self.require_id = require_id
        self._layout = None
        if require_id:
            self._validate()
            self.instance_blocks = _contiguous_blocks(self.values[:, schema.id_index])
        else:
            self.instance_blocks = []

    def _validate(self):
        s = self.schema
        if not bool(self.present[:, s.id_index].all()):
            bad = int(torch.nonzero(~self.present[:, s.id_index])[0])
            raise ValueError(f"row {bad}: instance id may never be missing")
        for j, kind in enumerate(s.kinds):
            col = self.values[:, j][self.present[:, j]]
            if kind == CATEGORICAL:
                if bool(((col != torch.round(col)) | (col < 0)).any()):
                    raise ValueError(f"column {s.names[j]!r}: categorical codes must be non-negative integers")
            if not bool(torch.isfinite(col).all()):
                raise ValueError(f"column {s.names[j]!r}: non-finite value")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def ids(self) -> torch.Tensor:
        return self.values[:, self.schema.id_index]

    @property
    def block_sizes(self) -> list[int]:
        return [b - a for _, a, b in self.instance_blocks]

    def column(self, name: str) -> tuple[torch.Tensor, torch.Tensor]:
        j = self.schema.index(name)
        return self.values[:, j], self.present[:, j]

    def take(self, rows) -> "CovariateMatrix":
        rows = torch.as_tensor(rows, dtype=torch.long)
        return CovariateMatrix(self.schema, self.values[rows], self.present[rows], self.require_id)

    def with_column(self, name: str, values, present) -> "CovariateMatrix":
        j = self.schema.index(name)
        v = self.values.clone()
        p = self.present.clone()
        v[:, j] = torch.as_tensor(values, dtype=torch.float64)
        p[:, j] = torch.as_tensor(present, dtype=torch.bool)
        return CovariateMatrix(self.schema, v, p, self.require_id)

    @property
    def layout(self) -> "BlockLayout":
        if self._layout is None:
            self._layout = BlockLayout(self.instance_blocks, self.n)
        return self._layout


def _contiguous_blocks(ids: torch.Tensor) -> list[tuple[int, int, int]]:
    blocks = []
    seen = set()
    ids_np = ids.numpy()
    start = 0
    n = len(ids_np)
    for i in range(1, n + 1):
        if i == n or ids_np[i] != ids_np[start]:
            code = int(ids_np[start])
            if code in seen:
                raise ValueError(f"rows of instance {code} are not contiguous (row {start})")
            seen.add(code)
            blocks.append((code, start, i))
            start = i
    return blocks


class BlockLayout:
    """Groups equally sized instance blocks so they can be factorised batched."""

    def __init__(self, blocks: Sequence[tuple[int, int, int]], n: int):
        self.n = n
        self.blocks = list(blocks)
        by_size: dict[int, list[int]] = {}
        for b, (_, a, e) in enumerate(self.blocks):
            by_size.setdefault(e - a, []).append(b)
        self.groups = []
        for size in sorted(by_size):
            members = by_size[size]
            rows = torch.tensor([list(range(self.blocks[b][1], self.blocks[b][2])) for b in members], dtype=torch.long)
            self.groups.append((size, members, rows))

    def gather(self, x: torch.Tensor, rows: torch.Tensor) -> torch.Tensor:
        """Rows of ``x`` (first dim N) arranged as (G, s, ...)."""
        return x[rows]


# ---------------------------------------------------------------------------
# kernel terms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Factor:
    kind: str  # SE | CAT | BIN
    column: int


@dataclass(frozen=True)
class KernelTerm:
    """Structure of one additive component.

    ``kind`` is SE, CAT or BIN for a single-covariate term and INTERACTION
    for a product. Parameters live in :class:`AdditivePrior`; the scalar
    helpers below take them explicitly.
    """

    kind: str
    factors: tuple[Factor, ...]
    label: str = ""

    def __post_init__(self):
        if self.kind == INTERACTION:
            if len(self.factors) < 2:
                raise ValueError("an interaction needs at least two factors")
        elif len(self.factors) != 1 or self.factors[0].kind != self.kind:
            raise ValueError(f"{self.kind} term must have exactly one matching factor")
        n_se = sum(f.kind == SE for f in self.factors)
        if n_se > 1:
            raise ValueError("an interaction may contain at most one SE factor")

    @property
    def covariate_indices(self) -> tuple[int, ...]:
        return tuple(sorted({f.column for f in self.factors}))

    @property
    def has_se(self) -> bool:
        return any(f.kind == SE for f in self.factors)

    def reads_id_categorically(self, id_index: int) -> bool:
        return any(f.kind == CAT and f.column == id_index for f in self.factors)


def _is_missing(v) -> bool:
    return v is None or (isinstance(v, float) and math.isnan(v))


def eval_term(term: KernelTerm, x: Sequence, x2: Sequence, scale: float = 1.0, lengthscale: float = 1.0) -> float:
    """Scalar evaluation of one term on two covariate rows.

    Rows are plain sequences; ``None`` or NaN marks a missing entry.
    """
    if not (math.isfinite(scale) and math.isfinite(lengthscale)):
        raise ValueError("non-finite kernel parameter")
    if scale <= 0 or lengthscale <= 0:
        raise ValueError("kernel scale and lengthscale must be positive")
    for j in term.covariate_indices:
        if j >= len(x) or j >= len(x2):
            raise ValueError(f"row too short for covariate column {j}")
        if _is_missing(x[j]) or _is_missing(x2[j]):
            return 0.0
    value = scale
    for f in term.factors:
        a, b = float(x[f.column]), float(x2[f.column])
        if f.kind == SE:
            value *= math.exp(-((a - b) ** 2) / (2.0 * lengthscale**2))
        elif f.kind == CAT:
            value *= 1.0 if a == b else 0.0
        else:
            value *= 1.0 if (a == 1.0 and b == 1.0) else 0.0
    return value


def _term_gram(term: KernelTerm, va, pa, vb, pb, scale, lengthscale) -> torch.Tensor:
    """Vectorised gram of one term; ``va`` is (..., n, Q), ``vb`` is (..., m, Q)."""
    cols = list(term.covariate_indices)
    with torch.no_grad():
        on = pa[..., :, cols].all(-1).unsqueeze(-1) & pb[..., :, cols].all(-1).unsqueeze(-2)
        for f in term.factors:
            a = va[..., :, f.column]
            b = vb[..., :, f.column]
            if f.kind == CAT:
                on = on & (a.unsqueeze(-1) == b.unsqueeze(-2))
            elif f.kind == BIN:
                on = on & (a == 1.0).unsqueeze(-1) & (b == 1.0).unsqueeze(-2)
        mask = on.to(torch.float64)
    se = next((f for f in term.factors if f.kind == SE), None)
    if se is None:
        return scale * mask
    # masked-out pairs may hold arbitrary placeholder distances; zero them before exp
    track = va.requires_grad or vb.requires_grad
    with torch.set_grad_enabled(track and torch.is_grad_enabled()):
        d = (va[..., :, se.column].unsqueeze(-1) - vb[..., :, se.column].unsqueeze(-2)) * mask
        dd = d * d
    return scale * (mask * torch.exp(dd * (-0.5 / (lengthscale * lengthscale))))


def gram(term: KernelTerm, X, X2, scale=1.0, lengthscale=1.0, max_entries: int = MAX_GRAM_ENTRIES) -> torch.Tensor:
    """|X| x |X2| matrix of ``eval_term`` over all row pairs."""
    if X.values.shape[-1] != X2.values.shape[-1]:
        raise ValueError("covariate matrices do not share a schema")
    n, m = X.values.shape[-2], X2.values.shape[-2]
    if n * m > max_entries:
        raise MemoryError(f"gram of {n}x{m} exceeds the cap of {max_entries} entries")
    scale = torch.as_tensor(scale, dtype=torch.float64)
    lengthscale = torch.as_tensor(lengthscale, dtype=torch.float64)
    return _term_gram(term, X.values, X.present, X2.values, X2.present, scale, lengthscale)


# ---------------------------------------------------------------------------
# prior specification
# ---------------------------------------------------------------------------

_TERM_RE = re.compile(r"^\s*([a-z_]+)\s*\(([^)]*)\)\s*$")


def parse_terms(spec: str, schema: CovariateSchema) -> list[KernelTerm]:
    """Parse ``"ca(id) + se(age) + ca_x_se(id,age)"`` into terms."""
    terms = []
    if not spec.strip():
        return terms
    for chunk in spec.split("+"):
        m = _TERM_RE.match(chunk)
        if not m:
            raise ValueError(f"cannot parse kernel term {chunk.strip()!r}")
        kinds = m.group(1).split("_x_")
        args = [a.strip() for a in m.group(2).split(",") if a.strip()]
        if len(kinds) != len(args):
            raise ValueError(f"term {chunk.strip()!r}: {len(kinds)} factors but {len(args)} covariates")
        factors = []
        for k, name in zip(kinds, args):
            if k not in _FACTOR_KINDS:
                raise ValueError(f"unknown factor kind {k!r} in {chunk.strip()!r}")
            col = schema.index(name)
            kind = _FACTOR_KINDS[k]
            if kind == SE and schema.kinds[col] != CONTINUOUS:
                raise ValueError(f"se() needs a continuous covariate, {name!r} is {schema.kinds[col]}")
            if col == schema.id_index and kind != CAT:
                raise ValueError("the id covariate may only enter through a ca() factor")
            factors.append(Factor(kind, col))
        kind = factors[0].kind if len(factors) == 1 else INTERACTION
        terms.append(KernelTerm(kind, tuple(factors), chunk.strip()))
    return terms


class AdditivePrior(nn.Module):
    """Per-latent-dimension additive GP prior with unit noise.

    All dimensions share the term structure; parameters differ. Scales and
    lengthscales are stored as logs. ``log_lengthscale`` has one column per
    term that contains an SE factor (``se_slot`` maps term -> column).
    """

    def __init__(self, schema: CovariateSchema, terms: Sequence[KernelTerm], latent_dim: int,
                 log_scale=None, log_lengthscale=None):
        super().__init__()
        self.schema = schema
        self.terms = list(terms)
        self.latent_dim = latent_dim
        self.se_slot = {}
        for r, t in enumerate(self.terms):
            if t.has_se:
                self.se_slot[r] = len(self.se_slot)
        R, n_se = len(self.terms), len(self.se_slot)
        if log_scale is None:
            log_scale = torch.zeros(latent_dim, R, dtype=torch.float64)
        if log_lengthscale is None:
            log_lengthscale = torch.zeros(latent_dim, n_se, dtype=torch.float64)
        self.log_scale = nn.Parameter(torch.as_tensor(log_scale, dtype=torch.float64).clone())
        self.log_lengthscale = nn.Parameter(torch.as_tensor(log_lengthscale, dtype=torch.float64).clone())
        if self.log_scale.shape != (latent_dim, R) or self.log_lengthscale.shape != (latent_dim, n_se):
            raise ValueError("parameter shapes do not match the term structure")
        idx = schema.id_index
        self.block_terms = [r for r, t in enumerate(self.terms) if t.reads_id_categorically(idx)]
        self.low_rank_terms = [r for r in range(R) if r not in self.block_terms]
        self.instance_term_index = next(
            (r for r in self.block_terms if self.terms[r].kind == INTERACTION and self.terms[r].has_se), None
        )

    @classmethod
    def from_spec(cls, spec: str, schema: CovariateSchema, latent_dim: int, X: CovariateMatrix | None = None):
        """Build a prior from a term string; lengthscales start at half the covariate range in ``X``."""
        terms = parse_terms(spec, schema)
        prior = cls(schema, terms, latent_dim)
        if X is not None:
            with torch.no_grad():
                for r, slot in prior.se_slot.items():
                    col = next(f.column for f in terms[r].factors if f.kind == SE)
                    v = X.values[:, col][X.present[:, col]]
                    rng = float(v.max() - v.min()) if v.numel() else 0.0
                    prior.log_lengthscale[:, slot] = math.log(rng / 2.0) if rng > 0 else 0.0
        return prior

    @property
    def spec(self) -> str:
        return " + ".join(t.label or _label(t, self.schema) for t in self.terms)

    def scale(self, l: int, r: int) -> torch.Tensor:
        return torch.exp(self.log_scale[l, r])

    def lengthscale(self, l: int, r: int) -> torch.Tensor:
        slot = self.se_slot.get(r)
        if slot is None:
            return torch.ones((), dtype=torch.float64)
        return torch.exp(self.log_lengthscale[l, slot])

    def term_gram(self, l: int, r: int, A, B) -> torch.Tensor:
        return _term_gram(self.terms[r], A.values, A.present, B.values, B.present,
                          self.scale(l, r), self.lengthscale(l, r))

    def _sum(self, l, rs, A, B):
        shape = A.values.shape[:-1] + (B.values.shape[-2],)
        out = torch.zeros(shape, dtype=torch.float64)
        for r in rs:
            out = out + self.term_gram(l, r, A, B)
        return out

    def gram_full(self, l: int, A, B) -> torch.Tensor:
        return self._sum(l, range(len(self.terms)), A, B)

    def gram_low_rank(self, l: int, A, B) -> torch.Tensor:
        """K_A: every term without a categorical factor on the id."""
        return self._sum(l, self.low_rank_terms, A, B)

    def gram_block(self, l: int, A, B) -> torch.Tensor:
        """K_R: the id-reading terms (zero across instances)."""
        return self._sum(l, self.block_terms, A, B)

    def diag_full(self, l: int, A) -> torch.Tensor:
        return self._diag(l, range(len(self.terms)), A)

    def diag_low_rank(self, l: int, A) -> torch.Tensor:
        return self._diag(l, self.low_rank_terms, A)

    def diag_block(self, l: int, A) -> torch.Tensor:
        return self._diag(l, self.block_terms, A)

    def _diag(self, l, rs, A):
        out = torch.zeros(A.values.shape[:-1], dtype=torch.float64)
        for r in rs:
            cols = list(self.terms[r].covariate_indices)
            ok = A.present[..., cols].all(-1)
            t = self.terms[r]
            on = ok
            for f in t.factors:
                if f.kind == BIN:
                    on = on & (A.values[..., f.column] == 1.0)
            out = out + torch.where(on, self.scale(l, r), torch.zeros((), dtype=torch.float64))
        return out


def _label(t: KernelTerm, schema: CovariateSchema) -> str:
    names = {SE: "se", CAT: "ca", BIN: "bi"}
    return "_x_".join(names[f.kind] for f in t.factors) + "(" + ",".join(schema.names[f.column] for f in t.factors) + ")"


# ---------------------------------------------------------------------------
# dense assembly
# ---------------------------------------------------------------------------


def _check_cap(n: int, cap: int):
    if n > cap:
        raise MemoryError(f"N={n} exceeds the dense cap of {cap}; use the sparse bounds")


def assemble_sigma(prior: AdditivePrior, l: int, X: CovariateMatrix, cap: int = DEFAULT_DENSE_CAP) -> torch.Tensor:
    """Dense Sigma_l = sum_r K^(l,r) + I."""
    _check_cap(X.n, cap)
    K = prior.gram_full(l, X, X)
    return K + NOISE_VARIANCE * torch.eye(X.n, dtype=torch.float64)


def split_structure(prior: AdditivePrior, l: int, X: CovariateMatrix, cap: int = DEFAULT_DENSE_CAP):
    """Return ``(K_A, blocks)`` with ``Sigma = K_A + blockdiag(blocks)``."""
    _check_cap(X.n, cap)
    K_A = prior.gram_low_rank(l, X, X)
    blocks = []
    for _, a, b in X.instance_blocks:
        Xp = _RowView(X.values[a:b], X.present[a:b])
        blocks.append(prior.gram_block(l, Xp, Xp) + NOISE_VARIANCE * torch.eye(b - a, dtype=torch.float64))
    return K_A, blocks


def block_diag(blocks: Iterable[torch.Tensor]) -> torch.Tensor:
    return torch.block_diag(*blocks)


@dataclass
class _RowView:
    values: torch.Tensor
    present: torch.Tensor


def rows_view(values: torch.Tensor, present: torch.Tensor) -> _RowView:
    """Lightweight row set (no validation) accepted by every gram routine."""
    return _RowView(values, present)


def is_psd(K: torch.Tensor, tol: float = 1e-8) -> bool:
    n = K.shape[-1]
    ev = torch.linalg.eigvalsh(0.5 * (K + K.T))
    return bool(ev.min() >= -tol * float(torch.trace(K)) / max(n, 1))


def cholesky_sigma(prior: AdditivePrior, l: int, X: CovariateMatrix, cap: int = DEFAULT_DENSE_CAP):
    return robust_cholesky(assemble_sigma(prior, l, X, cap))
