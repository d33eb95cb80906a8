"""Orthogonal transform embedding.

Every relation owns ``K`` raw ``d_s x d_s`` matrices and ``K`` log-scale
vectors. A raw matrix is orthonormalised column by column with Gram-Schmidt,
giving ``Q``; the relation then maps a head sub-embedding forward with
``diag(exp(s)) Q`` and a tail sub-embedding backward with ``diag(exp(-s)) Q^T``.

All variants reduce to a pair of per-group operators ``(F, B)``:

=============  ======================  ===========================
variant        F                       B
=============  ======================  ===========================
OTE            diag(exp(s)) Q          diag(exp(-s)) Q^T
OTE-noscale    Q                       Q^T
LNE            M (raw)                 M_back (raw, separate)
RotatE         rot(theta), d_s = 2     rot(theta)^T
=============  ======================  ===========================
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .numeric import group_distance

VARIANTS = ("OTE", "OTE-noscale", "LNE", "RotatE")

TAU_GS = 1e-6
TAU_DET = 1e-6
TAU_PATTERN = 1e-4


class DegenerateMatrixError(FloatingPointError):
    """Gram-Schmidt met a (near) linearly dependent column."""

    def __init__(self, index: tuple, column: int, norm: float):
        self.index = index
        self.column = column
        self.norm = norm
        super().__init__(f"matrix {index}: column {column} is degenerate (residual norm {norm:.3g})")


class InitializationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_entities: int
    num_relations: int
    dim: int
    sub_dim: int
    variant: str = "OTE"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.sub_dim < 2:
            raise ValueError("sub_dim must be at least 2")
        if self.dim % self.sub_dim:
            raise ValueError(f"sub_dim {self.sub_dim} does not divide dim {self.dim}")
        if self.variant == "RotatE" and self.sub_dim != 2:
            raise ValueError("RotatE requires sub_dim == 2")

    @property
    def num_groups(self) -> int:
        return self.dim // self.sub_dim

    @property
    def orthogonal(self) -> bool:
        return self.variant in ("OTE", "OTE-noscale")

    def relation_shapes(self) -> dict[str, tuple[int, ...]]:
        K, ds = self.num_groups, self.sub_dim
        shapes = {
            "OTE": {"rel_mat": (K, ds, ds), "rel_scale": (K, ds)},
            "OTE-noscale": {"rel_mat": (K, ds, ds)},
            "LNE": {"rel_mat": (K, ds, ds), "rel_mat_back": (K, ds, ds)},
            "RotatE": {"rel_phase": (K,)},
        }
        return shapes[self.variant]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {"entity": (self.num_entities, self.dim)}
        for name, shape in self.relation_shapes().items():
            shapes[name] = (self.num_relations,) + shape
        return shapes

    def parameter_count(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))


# ---------------------------------------------------------------------------
# Gram-Schmidt


def gram_schmidt(M: np.ndarray, tol: float = TAU_GS, reorthogonalize: bool = True) -> np.ndarray:
    """Orthonormalise the columns of ``M`` (any leading batch shape).

    Column ``k`` has its projections on the already finished columns removed
    and is then normalised. With ``reorthogonalize`` the removal is repeated
    once, which leaves the result unchanged in exact arithmetic but keeps the
    columns orthogonal to working precision for badly conditioned input.

    Raises :class:`DegenerateMatrixError` if a residual norm drops below ``tol``.
    """
    M = np.asarray(M)
    if M.shape[-1] != M.shape[-2]:
        raise ValueError(f"expected square matrices, got {M.shape}")
    if not np.issubdtype(M.dtype, np.floating):
        M = M.astype(np.float64)
    n = M.shape[-1]
    Q = np.empty_like(M)
    for k in range(n):
        v = M[..., :, k]
        basis = Q[..., :, :k]
        t = v - np.einsum("...ij,...j->...i", basis, np.einsum("...ij,...i->...j", basis, v))
        norm = np.sqrt(np.sum(t * t, axis=-1))
        bad = ~(norm >= tol)
        if np.any(bad):
            where = np.argwhere(np.broadcast_to(bad, norm.shape))[0]
            raise DegenerateMatrixError(tuple(int(i) for i in where), k, float(norm[tuple(where)]))
        if reorthogonalize and k:
            t = t - np.einsum("...ij,...j->...i", basis, np.einsum("...ij,...i->...j", basis, t))
            norm = np.sqrt(np.sum(t * t, axis=-1))
        Q[..., :, k] = t / norm[..., None]
    return Q


def gram_schmidt_vjp(M: np.ndarray, Q: np.ndarray, dQ: np.ndarray) -> np.ndarray:
    """Pull a gradient on ``Q = gram_schmidt(M)`` back to ``M``.

    Gram-Schmidt on square full-rank ``M`` is the ``Q`` factor of ``M = QR``
    with positive diagonal ``R``. Writing ``G = Q^T dQ``, the adjoint is
    ``dM = Q tril(G - G^T, -1) R^{-T}``.
    """
    R = np.triu(np.swapaxes(Q, -1, -2) @ M)
    G = np.swapaxes(Q, -1, -2) @ dQ
    P = np.tril(G - np.swapaxes(G, -1, -2), -1)
    Y = Q @ P
    # X R^T = Y by back substitution over columns. The last column of Q does
    # not depend on the last column of M, and solving this way keeps that
    # gradient exactly zero instead of round-off that Adam would amplify.
    n = M.shape[-1]
    X = np.zeros_like(Y)
    for j in range(n - 1, -1, -1):
        acc = Y[..., :, j] - np.einsum("...ik,...k->...i", X[..., :, j + 1 :], R[..., j, j + 1 :])
        X[..., :, j] = acc / R[..., j, j][..., None]
    return X


# ---------------------------------------------------------------------------
# relation operators


def rotation(theta: np.ndarray) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def _rotation_derivative(theta: np.ndarray) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([-s, -c], -1), np.stack([c, -s], -1)], -2)


def relation_operators(variant: str, rel: dict[str, np.ndarray], tol: float = TAU_GS):
    """Forward and backward operators for one or many relations.

    ``rel`` maps relation parameter names (``rel_mat``, ``rel_scale``,
    ``rel_mat_back``, ``rel_phase``) to arrays with any shared leading shape.
    Returns ``(F, B, cache)``; ``cache`` feeds :func:`relation_operators_vjp`.
    """
    if variant == "OTE":
        Q = gram_schmidt(rel["rel_mat"], tol)
        scale = np.exp(rel["rel_scale"])
        F = scale[..., :, None] * Q
        B = np.swapaxes(Q, -1, -2) / scale[..., :, None]
        return F, B, {"Q": Q, "scale": scale, "F": F, "B": B}
    if variant == "OTE-noscale":
        Q = gram_schmidt(rel["rel_mat"], tol)
        return Q, np.swapaxes(Q, -1, -2), {"Q": Q}
    if variant == "LNE":
        return rel["rel_mat"], rel["rel_mat_back"], {}
    if variant == "RotatE":
        F = rotation(rel["rel_phase"])
        return F, np.swapaxes(F, -1, -2), {}
    raise ValueError(f"unknown variant {variant!r}")


def relation_operators_vjp(variant: str, rel: dict[str, np.ndarray], cache: dict, dF: np.ndarray, dB: np.ndarray):
    """Gradients of the relation parameters given gradients on ``F`` and ``B``."""
    if variant == "OTE":
        Q, scale, F, B = cache["Q"], cache["scale"], cache["F"], cache["B"]
        dQ = scale[..., :, None] * dF + np.swapaxes(dB / scale[..., :, None], -1, -2)
        dscale = np.sum(dF * F, axis=-1) - np.sum(dB * B, axis=-1)
        return {"rel_mat": gram_schmidt_vjp(rel["rel_mat"], Q, dQ), "rel_scale": dscale}
    if variant == "OTE-noscale":
        Q = cache["Q"]
        dQ = dF + np.swapaxes(dB, -1, -2)
        return {"rel_mat": gram_schmidt_vjp(rel["rel_mat"], Q, dQ)}
    if variant == "LNE":
        return {"rel_mat": dF, "rel_mat_back": dB}
    if variant == "RotatE":
        dR = _rotation_derivative(rel["rel_phase"])
        dtheta = np.sum(dF * dR, axis=(-1, -2)) + np.sum(dB * np.swapaxes(dR, -1, -2), axis=(-1, -2))
        return {"rel_phase": dtheta}
    raise ValueError(f"unknown variant {variant!r}")


def orthogonal_part(variant: str, rel: dict[str, np.ndarray]):
    """``(Q, s)`` such that the forward operator is ``diag(exp(s)) Q``.

    For LNE ``Q`` is the raw matrix (not orthogonal) and ``s`` is zero.
    """
    if variant in ("OTE", "OTE-noscale"):
        Q = gram_schmidt(rel["rel_mat"])
        s = rel.get("rel_scale")
        return Q, np.zeros(Q.shape[:-1], Q.dtype) if s is None else s
    if variant == "LNE":
        M = rel["rel_mat"]
        return M, np.zeros(M.shape[:-1], M.dtype)
    R = rotation(rel["rel_phase"])
    return R, np.zeros(R.shape[:-1], R.dtype)


# ---------------------------------------------------------------------------
# initialisation


def init_relation(
    cfg: ModelConfig, rng: np.random.Generator, dtype=np.float64, max_tries: int = 100, positive_det: bool = True
):
    """Parameters for one relation.

    Raw matrices are standard normal and re-drawn (per group) until
    ``|det| > TAU_DET``; scales start at zero. Returns ``(params, resamples)``.

    Gram-Schmidt keeps the sign of ``det M``, and training cannot move a
    matrix across ``det = 0``. With ``positive_det`` the first column of a
    negative-determinant draw is negated, so every ``Q`` starts as a proper
    rotation; inverse and composition patterns need matching orientations
    across relations and are otherwise unreachable in about half the groups.
    """
    K, ds = cfg.num_groups, cfg.sub_dim
    rel: dict[str, np.ndarray] = {}
    resamples = 0
    if cfg.variant == "RotatE":
        rel["rel_phase"] = rng.uniform(-np.pi, np.pi, size=K).astype(dtype)
        return rel, resamples
    if cfg.variant == "LNE":
        # raw maps are applied directly, so keep them near norm-preserving
        rel["rel_mat"] = (rng.standard_normal((K, ds, ds)) / np.sqrt(ds)).astype(dtype)
        rel["rel_mat_back"] = (rng.standard_normal((K, ds, ds)) / np.sqrt(ds)).astype(dtype)
        return rel, resamples
    mats = rng.standard_normal((K, ds, ds))
    for i in range(K):
        tries = 0
        while abs(np.linalg.det(mats[i])) <= TAU_DET:
            tries += 1
            if tries > max_tries:
                raise InitializationError(f"could not draw a full-rank {ds}x{ds} matrix in {max_tries} tries")
            mats[i] = rng.standard_normal((ds, ds))
        resamples += tries
    if positive_det:
        flip = np.linalg.det(mats) < 0
        mats[flip, :, 0] *= -1
    rel["rel_mat"] = mats.astype(dtype)
    if cfg.variant == "OTE":
        rel["rel_scale"] = np.zeros((K, ds), dtype=dtype)
    return rel, resamples


def init_entities(cfg: ModelConfig, rng: np.random.Generator, gamma: float, dtype=np.float64) -> np.ndarray:
    bound = gamma / cfg.dim
    return rng.uniform(-bound, bound, size=(cfg.num_entities, cfg.dim)).astype(dtype)


# ---------------------------------------------------------------------------
# model


class OTEModel:
    """Entity table plus relation table for one :class:`ModelConfig`.

    ``params`` holds plain arrays: ``entity`` is ``(N, d)``; relation blocks
    have a leading relation axis. ``version`` increases whenever parameters
    change so derived caches can detect staleness.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        expected = cfg.param_shapes()
        if set(params) != set(expected):
            raise ValueError(f"parameter blocks {sorted(params)} do not match {sorted(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.params = params
        self.version = 0

    @classmethod
    def random(
        cls, cfg: ModelConfig, rng: np.random.Generator, gamma: float = 9.0, dtype=np.float32, positive_det: bool = True
    ) -> "OTEModel":
        entity = init_entities(cfg, rng, gamma, dtype)
        rels = [init_relation(cfg, rng, dtype, positive_det=positive_det)[0] for _ in range(cfg.num_relations)]
        params = {"entity": entity}
        for name, shape in cfg.relation_shapes().items():
            params[name] = np.stack([r[name] for r in rels]) if rels else np.zeros((0,) + shape, dtype)
        return cls(cfg, params)

    @property
    def dtype(self):
        return self.params["entity"].dtype

    def bump(self) -> None:
        self.version += 1

    def copy(self) -> "OTEModel":
        other = OTEModel(self.cfg, {k: v.copy() for k, v in self.params.items()})
        other.version = self.version
        return other

    def astype(self, dtype) -> "OTEModel":
        return OTEModel(self.cfg, {k: v.astype(dtype) for k, v in self.params.items()})

    def with_variant(self, variant: str) -> "OTEModel":
        """Same parameters under another variant with identical blocks."""
        cfg = replace(self.cfg, variant=variant)
        return OTEModel(cfg, {k: v for k, v in self.params.items()})

    @property
    def entity_groups(self) -> np.ndarray:
        return self.params["entity"].reshape(self.cfg.num_entities, self.cfg.num_groups, self.cfg.sub_dim)

    def relation_params(self, r=None) -> dict[str, np.ndarray]:
        names = self.cfg.relation_shapes()
        if r is None:
            return {k: self.params[k] for k in names}
        return {k: self.params[k][r] for k in names}

    def operators(self):
        """``(F, B, cache)`` for every relation, shapes ``(R, K, d_s, d_s)``."""
        return relation_operators(self.cfg.variant, self.relation_params())

    def operators_vjp(self, cache, dF, dB) -> dict[str, np.ndarray]:
        return relation_operators_vjp(self.cfg.variant, self.relation_params(), cache, dF, dB)

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())

    def determinants(self) -> np.ndarray:
        if "rel_mat" not in self.params:
            return np.ones((self.cfg.num_relations, self.cfg.num_groups))
        return np.linalg.det(self.params["rel_mat"].astype(np.float64))

    def repair_degenerate(
        self, rng: np.random.Generator, tau: float = TAU_DET, force: tuple[int, int] | None = None
    ) -> list[tuple[int, int]]:
        """Reset raw matrices whose determinant fell to ``tau`` or below.

        A flagged matrix is replaced by its own orthonormalisation, which has
        determinant +-1 and yields the same ``Q``, so the learned transform is
        kept. Only if that fails is the matrix re-drawn at random. ``force``
        names one ``(relation, group)`` to reset regardless of its determinant.
        """
        if not self.cfg.orthogonal:
            return []
        bad = [tuple(int(x) for x in b) for b in np.argwhere(np.abs(self.determinants()) <= tau)]
        if force is not None and tuple(force) not in bad:
            bad.append(tuple(int(x) for x in force))
        ds = self.cfg.sub_dim
        for r, i in bad:
            m = self.params["rel_mat"][r, i].astype(np.float64)
            try:
                q = gram_schmidt(m, tol=1e-12)
            except DegenerateMatrixError:
                q = None
            if q is not None and np.linalg.det(q) * np.linalg.det(m) < 0:
                q[:, -1] *= -1
            if q is None or not np.all(np.isfinite(q)):
                while True:
                    q = rng.standard_normal((ds, ds))
                    if abs(np.linalg.det(q)) > tau:
                        break
                if np.linalg.det(q) < 0:
                    q[:, 0] *= -1
            self.params["rel_mat"][r, i] = q
        if bad:
            self.bump()
        return bad


# ---------------------------------------------------------------------------
# single-triple scoring


def _groups(e: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    return np.asarray(e).reshape(cfg.num_groups, cfg.sub_dim)


def project_forward(e_h: np.ndarray, rel: dict[str, np.ndarray], cfg: ModelConfig) -> np.ndarray:
    """Projection of a head embedding through a relation, flattened to length ``d``."""
    F, _, _ = relation_operators(cfg.variant, rel)
    return np.einsum("kij,kj->ki", F, _groups(e_h, cfg)).reshape(-1)


def project_backward(e_t: np.ndarray, rel: dict[str, np.ndarray], cfg: ModelConfig) -> np.ndarray:
    """Projection of a tail embedding back through a relation."""
    _, B, _ = relation_operators(cfg.variant, rel)
    return np.einsum("kij,kj->ki", B, _groups(e_t, cfg)).reshape(-1)


def grouped_distance(a: np.ndarray, b: np.ndarray, cfg: ModelConfig) -> float:
    """Sum over groups of the L2 distance between two length-``d`` vectors."""
    dist, _ = group_distance(_groups(a, cfg) - _groups(b, cfg))
    return float(dist)


def distance_forward(model: OTEModel, h: int, r: int, t: int) -> float:
    ent = model.params["entity"]
    proj = project_forward(ent[h], model.relation_params(r), model.cfg)
    return grouped_distance(proj, ent[t], model.cfg)


def distance_backward(model: OTEModel, h: int, r: int, t: int) -> float:
    ent = model.params["entity"]
    proj = project_backward(ent[t], model.relation_params(r), model.cfg)
    return grouped_distance(proj, ent[h], model.cfg)


# ---------------------------------------------------------------------------
# relation patterns
#
# Each check works on ``(Q, s)`` pairs from :func:`orthogonal_part`; the
# ``verify_*`` wrappers take relation parameter dicts directly.


def _scaled(Q, s):
    return np.exp(s)[..., :, None] * Q


def symmetry_residual(Q: np.ndarray, s: np.ndarray) -> float:
    """``max(|Q Q - I|, |s|)`` over all groups."""
    eye = np.eye(Q.shape[-1])
    return float(max(np.max(np.abs(Q @ Q - eye)), np.max(np.abs(s))))


def inverse_residual(Q1, s1, Q2, s2) -> float:
    lhs = _scaled(Q1, s1)
    rhs = np.swapaxes(Q2, -1, -2) * np.exp(-s2)[..., None, :]
    return float(np.max(np.abs(lhs - rhs)))


def composition_residual(Q1, s1, Q2, s2, Q3, s3) -> float:
    composed = _scaled(Q2, s2) @ _scaled(Q1, s1)
    return float(np.max(np.abs(_scaled(Q3, s3) - composed)))


def verify_symmetry(rel: dict, variant: str = "OTE", tau: float = TAU_PATTERN) -> bool:
    return symmetry_residual(*orthogonal_part(variant, rel)) < tau


def verify_inverse(rel1: dict, rel2: dict, variant: str = "OTE", tau: float = TAU_PATTERN) -> bool:
    return inverse_residual(*orthogonal_part(variant, rel1), *orthogonal_part(variant, rel2)) < tau


def verify_composition(rel1: dict, rel2: dict, rel3: dict, variant: str = "OTE", tau: float = TAU_PATTERN) -> bool:
    parts = [orthogonal_part(variant, r) for r in (rel1, rel2, rel3)]
    return composition_residual(*parts[0], *parts[1], *parts[2]) < tau


def relation_transform(model: OTEModel, r: int):
    """``(Q, s)`` of relation ``r`` for the pattern checks."""
    return orthogonal_part(model.cfg.variant, model.relation_params(r))
