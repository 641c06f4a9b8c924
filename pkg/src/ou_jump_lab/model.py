"""Model container and matrix/measure primitives.

The process under study is the Ornstein-Uhlenbeck diffusion with generator

    L f = 0.5 * tr(Q D^2 f) + <B x, grad f>,

where ``Q`` (the diffusion matrix) is symmetric positive definite and ``B``
(the drift matrix) has all eigenvalues in the open left half plane.  This
module owns:

* input validation and the two built-in presets,
* an in-house scaling-and-squaring matrix exponential,
* the time-t covariance Q_t (block-exponential method), the equilibrium
  covariance Q_inf (Lyapunov solve), and a cached bundle of derived
  per-time matrices,
* the quadratic form R, Gaussian densities in log space, and the
  invariant measure.

Everything is plain ``numpy``; matrices are small (desk scale, n <= 3 in
practice) so clarity beats asymptotics throughout.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import (
    DegenerateSample,
    NonFinite,
    NotHurwitz,
    NotPositiveDefinite,
    NotSymmetric,
    SolveFailure,
    TimeOutOfRegime,
    ValidationError,
)

__all__ = [
    "OUModel",
    "CovarianceFamily",
    "GaussianMeasure",
    "validate_model",
    "model_from_config",
    "preset_standard",
    "preset_rotating2d",
    "matrix_exp",
    "cov_qt",
    "cov_qinf",
    "dt_matrix",
    "dtx_ratio_check",
    "quadratic_R",
    "gamma_density",
    "gamma_logdensity",
    "invariant_measure",
    "mixing_time",
]

_SYM_TOL = 1e-12
_QT_SYM_TOL = 1e-10
_LYAP_RESIDUAL_TOL = 1e-10
_TIME_CLAMP = 1e3  # documented clamp: cov_qt refuses t beyond this


# ---------------------------------------------------------------------------
# model container and validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OUModel:
    """Validated diffusion/drift pair.

    Attributes
    ----------
    n : int
        State dimension.
    diffusion : ndarray, shape (n, n)
        Symmetric positive definite noise covariance generator.
    drift : ndarray, shape (n, n)
        Drift matrix, all eigenvalues in the open left half plane.
    """

    n: int
    diffusion: np.ndarray
    drift: np.ndarray

    def __post_init__(self) -> None:
        self.diffusion.setflags(write=False)
        self.drift.setflags(write=False)


def validate_model(diffusion, drift, *, sym_tol: float = _SYM_TOL) -> OUModel:
    """Check (diffusion, drift) and return an :class:`OUModel`.

    Raises
    ------
    NotSymmetric
        if the diffusion matrix differs from its transpose by more than
        ``sym_tol`` (entrywise, relative to the largest entry).
    NotPositiveDefinite
        if the (symmetrized) diffusion matrix has no Cholesky factor.
    NotHurwitz
        if any drift eigenvalue has real part >= 0.
    """
    q = np.array(diffusion, dtype=float)
    b = np.array(drift, dtype=float)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ValidationError(f"diffusion matrix must be square, got shape {q.shape}")
    if b.shape != q.shape:
        raise ValidationError(
            f"drift shape {b.shape} does not match diffusion shape {q.shape}"
        )
    if not (np.isfinite(q).all() and np.isfinite(b).all()):
        raise ValidationError("model matrices must be finite")
    scale = max(1.0, float(np.abs(q).max()))
    asym = float(np.abs(q - q.T).max())
    if asym > sym_tol * scale:
        raise NotSymmetric(
            f"diffusion asymmetry {asym:.3e} exceeds {sym_tol:.1e} * {scale:.3e}"
        )
    q = 0.5 * (q + q.T)
    try:
        np.linalg.cholesky(q)
    except np.linalg.LinAlgError:
        lam_min = float(np.linalg.eigvalsh(q).min())
        raise NotPositiveDefinite(
            f"diffusion matrix is not positive definite (min eigenvalue {lam_min:.3e})"
        ) from None
    eigs = np.linalg.eigvals(b)
    worst = float(eigs.real.max())
    if worst >= 0.0:
        raise NotHurwitz(
            f"drift eigenvalue with real part {worst:.3e} >= 0 (eigenvalues {eigs})"
        )
    return OUModel(n=q.shape[0], diffusion=q, drift=b)


def preset_standard(n: int = 1) -> OUModel:
    """diffusion = I_n, drift = -I_n."""
    eye = np.eye(n)
    return validate_model(eye, -eye)


def preset_rotating2d(omega: float = 1.0) -> OUModel:
    """Planar model with a rotational (nonsymmetric) drift component.

    drift = [[-1, -omega], [omega, -1]], diffusion = I_2.  At omega = 0 this
    degenerates to the standard 2-d model; any nonzero omega makes the drift
    non-normal with respect to nothing -- it stays normal -- but crucially
    non-self-adjoint, which is the regime this package exists to exercise.
    """
    b = np.array([[-1.0, -float(omega)], [float(omega), -1.0]])
    return validate_model(np.eye(2), b)


def model_from_config(cfg: Mapping) -> OUModel:
    """Build a model from a config mapping.

    Accepted keys: ``preset`` (``standard`` / ``rotating2d``), ``n``,
    ``omega``, and explicit ``Q`` / ``B`` (row-major flat lists or nested
    lists).  Explicit matrices win over presets.
    """
    known = {"preset", "n", "omega", "Q", "B"}
    extra = set(cfg) - known
    if extra:
        raise ValidationError(f"unknown model config keys: {sorted(extra)}")
    if "Q" in cfg or "B" in cfg:
        if not ("Q" in cfg and "B" in cfg and "n" in cfg):
            raise ValidationError("explicit models need all of n, Q, B")
        n = int(cfg["n"])
        return validate_model(_as_matrix(cfg["Q"], n), _as_matrix(cfg["B"], n))
    preset = cfg.get("preset", "standard")
    if preset == "standard":
        return preset_standard(int(cfg.get("n", 1)))
    if preset == "rotating2d":
        return preset_rotating2d(float(cfg.get("omega", 1.0)))
    raise ValidationError(f"unknown preset {preset!r}")


def _as_matrix(data, n: int) -> np.ndarray:
    arr = np.array(data, dtype=float)
    if arr.ndim == 1:
        if arr.size != n * n:
            raise ValidationError(
                f"flat matrix has {arr.size} entries, expected {n * n}"
            )
        arr = arr.reshape(n, n)
    if arr.shape != (n, n):
        raise ValidationError(f"matrix shape {arr.shape} != ({n}, {n})")
    return arr


# ---------------------------------------------------------------------------
# matrix exponential (scaling and squaring, degree-13 diagonal Pade)
# ---------------------------------------------------------------------------

_PADE13 = (
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
)
_PADE13_THETA = 5.371920351148152


def matrix_exp(a) -> np.ndarray:
    """Matrix exponential e^A.

    Degree-13 diagonal Pade approximant with scaling and squaring; the
    scaling threshold is the usual double-precision theta_13.  Matches
    ``scipy.linalg.expm`` to machine precision on well-conditioned input
    (the test suite pins this) while keeping the hot path dependency-free.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"matrix_exp needs a square matrix, got {a.shape}")
    n = a.shape[0]
    norm = float(np.linalg.norm(a, 1))
    squarings = 0
    if norm > _PADE13_THETA and np.isfinite(norm):
        squarings = max(0, int(math.ceil(math.log2(norm / _PADE13_THETA))))
        a = a / (2.0 ** squarings)
    b = _PADE13
    ident = np.eye(n)
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a2 @ a4
    u = a @ (
        a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
        + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * ident
    )
    v = (
        a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2)
        + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * ident
    )
    try:
        r = np.linalg.solve(v - u, v + u)
    except np.linalg.LinAlgError as exc:
        raise SolveFailure(f"Pade denominator singular: {exc}") from None
    for _ in range(squarings):
        r = r @ r
    return r


# ---------------------------------------------------------------------------
# covariances
# ---------------------------------------------------------------------------

def cov_qt(model: OUModel, t: float) -> np.ndarray:
    """Covariance of the time-t marginal started from a point.

    Computed with the block-exponential method: exponentiating

        M = [[B, Q], [0, -B^T]] * t

    yields ``[[F11, G], [0, F22]]`` with ``F11 = e^{tB}`` and
    ``G = int_0^t e^{(t-s)B} Q e^{-s B^T} ds``, so ``Q_t = G @ F11^T``.
    One exponential per call, no quadrature.

    ``t = 0`` returns the zero matrix, ``t = inf`` returns the equilibrium
    covariance.  Times beyond 1e3 raise :class:`NonFinite` (documented
    clamp: the anti-stable block ``e^{t B^T}`` overflows double precision
    long before that and the equilibrium limit should be used instead).
    """
    t = float(t)
    if t < 0.0:
        raise ValidationError(f"cov_qt needs t >= 0, got {t}")
    n = model.n
    if t == 0.0:
        return np.zeros((n, n))
    if math.isinf(t):
        return cov_qinf(model).qinf.copy()
    if t > _TIME_CLAMP:
        raise NonFinite(
            f"t = {t:g} exceeds the documented clamp {_TIME_CLAMP:g}; "
            "use the equilibrium covariance for large times"
        )
    block = np.zeros((2 * n, 2 * n))
    block[:n, :n] = model.drift
    block[:n, n:] = model.diffusion
    block[n:, n:] = -model.drift.T
    with np.errstate(over="ignore", invalid="ignore"):
        f = matrix_exp(block * t)
    if not np.isfinite(f).all():
        raise NonFinite(f"block exponential overflowed at t = {t:g}")
    qt = f[:n, n:] @ f[:n, :n].T
    scale = max(1.0, float(np.abs(qt).max()))
    asym = float(np.abs(qt - qt.T).max())
    if asym > _QT_SYM_TOL * scale:
        raise SolveFailure(
            f"computed covariance lost symmetry at t = {t:g} (deviation {asym:.3e})"
        )
    qt = 0.5 * (qt + qt.T)
    try:
        np.linalg.cholesky(qt)
    except np.linalg.LinAlgError:
        raise SolveFailure(
            f"computed covariance not positive definite at t = {t:g}"
        ) from None
    return qt


def _lyapunov_solve(model: OUModel) -> np.ndarray:
    """Solve drift X + X drift^T = -diffusion for X (vectorized Kronecker form).

    For the desk-scale dimensions used here a dense Kronecker solve is exact
    enough and keeps the solver in-house; larger problems fall back to
    scipy's Schur-based routine.
    """
    n = model.n
    b = model.drift
    if n <= 8:
        eye = np.eye(n)
        lhs = np.kron(b, eye) + np.kron(eye, b)
        rhs = -model.diffusion.reshape(-1)
        try:
            x = np.linalg.solve(lhs, rhs).reshape(n, n)
        except np.linalg.LinAlgError as exc:
            raise SolveFailure(f"Lyapunov system singular: {exc}") from None
    else:  # pragma: no cover - beyond the scale this package targets
        from scipy.linalg import solve_continuous_lyapunov

        x = solve_continuous_lyapunov(b, -model.diffusion)
    return 0.5 * (x + x.T)


@dataclass
class CovarianceFamily:
    """Equilibrium covariance plus a per-time cache of derived matrices.

    Fields follow the wire contract: ``qinf``, ``qinf_inv``, ``qinf_logdet``
    are the equilibrium covariance, its inverse and log-determinant.  The
    family also memoizes, per time t, everything the kernel and semigroup
    code keeps asking for (Q_t and friends); the cache is keyed by the float
    t itself and guarded by a lock so threaded sweeps can share one family.
    """

    model: OUModel
    qinf: np.ndarray
    qinf_inv: np.ndarray
    qinf_logdet: float
    qinf_chol: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def qt_bundle(self, t: float) -> "QtBundle":
        t = float(t)
        with self._lock:
            hit = self._cache.get(t)
        if hit is not None:
            return hit
        bundle = _build_qt_bundle(self, t)
        with self._lock:
            self._cache.setdefault(t, bundle)
        return bundle

    def mehler_cov(self, t: float):
        """(Q_t^{-1} - Q_inf^{-1})^{-1} if representable, else None.

        This is the covariance of the recentred Gaussian hidden inside the
        kernel.  Near equilibrium the difference of inverses collapses to
        rounding noise and the inverse is meaningless; ``None`` tells the
        quadrature layer to integrate against the invariant measure instead.
        """
        bundle = self.qt_bundle(t)
        return bundle.mehler_cov


@dataclass(frozen=True)
class QtBundle:
    """Per-time derived matrices, computed once and reused."""

    t: float
    qt: np.ndarray
    qt_chol: np.ndarray
    qt_inv: np.ndarray
    qt_logdet: float
    exp_tb: np.ndarray
    dt: np.ndarray
    inv_gap: np.ndarray          # Q_t^{-1} - Q_inf^{-1}  (SPD for finite t)
    mehler_cov: "np.ndarray | None"
    mehler_logdet: float


def _build_qt_bundle(family: CovarianceFamily, t: float) -> QtBundle:
    model = family.model
    qt = cov_qt(model, t)
    chol = np.linalg.cholesky(qt)
    qt_inv = _chol_inverse(chol)
    qt_logdet = 2.0 * float(np.log(np.diag(chol)).sum())
    exp_tb = matrix_exp(model.drift * t)
    dt = dt_matrix(model, family, t)
    inv_gap = 0.5 * ((qt_inv - family.qinf_inv) + (qt_inv - family.qinf_inv).T)
    mehler_cov = None
    mehler_logdet = math.nan
    try:
        gap_chol = np.linalg.cholesky(inv_gap)
    except np.linalg.LinAlgError:
        gap_chol = None
    if gap_chol is not None:
        mehler_cov = _chol_inverse(gap_chol)
        mehler_logdet = -2.0 * float(np.log(np.diag(gap_chol)).sum())
        if not np.isfinite(mehler_cov).all():
            mehler_cov = None
            mehler_logdet = math.nan
    return QtBundle(
        t=t,
        qt=qt,
        qt_chol=chol,
        qt_inv=qt_inv,
        qt_logdet=qt_logdet,
        exp_tb=exp_tb,
        dt=dt,
        inv_gap=inv_gap,
        mehler_cov=mehler_cov,
        mehler_logdet=mehler_logdet,
    )


def _chol_inverse(chol: np.ndarray) -> np.ndarray:
    """Inverse of A = L L^T from its Cholesky factor, symmetrized."""
    n = chol.shape[0]
    linv = np.linalg.solve(chol, np.eye(n))
    inv = linv.T @ linv
    return 0.5 * (inv + inv.T)


def cov_qinf(model: OUModel) -> CovarianceFamily:
    """Equilibrium covariance family.

    Solves the continuous Lyapunov equation and verifies the residual
    against 1e-10 * ||diffusion||_F before accepting the solution.
    """
    qinf = _lyapunov_solve(model)
    residual = model.drift @ qinf + qinf @ model.drift.T + model.diffusion
    res_norm = float(np.linalg.norm(residual))
    gate = _LYAP_RESIDUAL_TOL * max(float(np.linalg.norm(model.diffusion)), 1e-300)
    if res_norm > gate:
        raise SolveFailure(
            f"Lyapunov residual {res_norm:.3e} exceeds gate {gate:.3e}"
        )
    try:
        chol = np.linalg.cholesky(qinf)
    except np.linalg.LinAlgError:
        raise SolveFailure("equilibrium covariance not positive definite") from None
    qinf_inv = _chol_inverse(chol)
    qinf_logdet = 2.0 * float(np.log(np.diag(chol)).sum())
    return CovarianceFamily(
        model=model,
        qinf=qinf,
        qinf_inv=qinf_inv,
        qinf_logdet=qinf_logdet,
        qinf_chol=chol,
    )


def mixing_time(model: OUModel) -> float:
    """1 / |spectral abscissa of the drift| -- the slowest relaxation scale."""
    eigs = np.linalg.eigvals(model.drift)
    return 1.0 / abs(float(eigs.real.max()))


# ---------------------------------------------------------------------------
# drift-adjoint flow and quadratic form
# ---------------------------------------------------------------------------

def dt_matrix(model: OUModel, family: CovarianceFamily, t: float) -> np.ndarray:
    """Similarity-transported adjoint flow Qinf e^{-t drift^T} Qinf^{-1}.

    Defined for every finite t (positive, negative or zero); ``t = 0`` is the
    identity exactly, and the family satisfies the flow property
    D_s D_t = D_{s+t}.
    """
    t = float(t)
    if not math.isfinite(t):
        raise ValidationError(f"dt_matrix needs finite t, got {t}")
    if t == 0.0:
        return np.eye(model.n)
    out = family.qinf @ matrix_exp(-t * model.drift.T) @ family.qinf_inv
    if not np.isfinite(out).all():
        raise NonFinite(f"adjoint flow overflowed at t = {t:g}")
    return out


def dtx_ratio_check(
    model: OUModel,
    family: CovarianceFamily,
    samples: Iterable,
) -> tuple:
    """Fitted constants for |x - D_t x| / (|t| |x|) over a sample set.

    Input: iterable of (t, x) with 0 < |t| <= 1 and x != 0.  Returns
    (c_low, c_high), the min and max observed ratio; both are positive for
    any sane model and bracket 1 loosely on the standard preset.
    """
    lo = math.inf
    hi = -math.inf
    count = 0
    for t, x in samples:
        t = float(t)
        x = np.asarray(x, dtype=float).reshape(model.n)
        if t == 0.0 or not np.any(x):
            raise DegenerateSample(f"ratio undefined at t = {t}, x = {x}")
        if abs(t) > 1.0:
            raise TimeOutOfRegime(f"|t| = {abs(t):g} > 1 outside comparison range")
        gap = x - dt_matrix(model, family, t) @ x
        ratio = float(np.linalg.norm(gap)) / (abs(t) * float(np.linalg.norm(x)))
        lo = min(lo, ratio)
        hi = max(hi, ratio)
        count += 1
    if count == 0:
        raise DegenerateSample("empty sample set")
    return (lo, hi)


def quadratic_R(family: CovarianceFamily, x) -> "float | np.ndarray":
    """R(x) = 0.5 <Qinf^{-1} x, x>, evaluated as 0.5 |L^{-1} x|^2.

    Going through the Cholesky factor keeps the result >= 0 exactly.
    Accepts a single point (shape (n,)) or a batch (shape (m, n)).
    """
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != family.model.n:
        raise ValidationError(
            f"points have dimension {pts.shape[1]}, model has {family.model.n}"
        )
    z = np.linalg.solve(family.qinf_chol, pts.T)
    vals = 0.5 * np.einsum("ij,ij->j", z, z)
    return float(vals[0]) if single else vals


# ---------------------------------------------------------------------------
# Gaussian measures and densities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianMeasure:
    """Centered-or-not Gaussian with cached Cholesky and normalizer."""

    mean: np.ndarray
    covariance: np.ndarray
    log_norm_const: float = field(init=False)
    _chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.covariance, dtype=float)
        n = mean.size
        if cov.shape != (n, n):
            raise ValidationError(f"covariance shape {cov.shape} != ({n}, {n})")
        try:
            chol = np.linalg.cholesky(0.5 * (cov + cov.T))
        except np.linalg.LinAlgError:
            raise NotPositiveDefinite("measure covariance not positive definite") from None
        logdet = 2.0 * float(np.log(np.diag(chol)).sum())
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", 0.5 * (cov + cov.T))
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(
            self, "log_norm_const", -0.5 * (n * math.log(2.0 * math.pi) + logdet)
        )

    @property
    def dim(self) -> int:
        return self.mean.size

    def logpdf(self, x) -> "float | np.ndarray":
        pts = np.asarray(x, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts) - self.mean
        z = np.linalg.solve(self._chol, pts.T)
        out = self.log_norm_const - 0.5 * np.einsum("ij,ij->j", z, z)
        return float(out[0]) if single else out

    def pdf(self, x) -> "float | np.ndarray":
        return np.exp(self.logpdf(x))

    def interval_mass(self, lo: float, hi: float) -> float:
        """Exact mass of [lo, hi] (one-dimensional measures only)."""
        if self.dim != 1:
            raise ValidationError("interval_mass is one-dimensional only")
        sd = float(self._chol[0, 0])
        m = float(self.mean[0])
        return float(ndtr((hi - m) / sd) - ndtr((lo - m) / sd))


def invariant_measure(family: CovarianceFamily) -> GaussianMeasure:
    """The invariant Gaussian measure of the semigroup."""
    return GaussianMeasure(np.zeros(family.model.n), family.qinf)


def gamma_logdensity(
    model: OUModel,
    t: float,
    x,
    family: "CovarianceFamily | None" = None,
) -> "float | np.ndarray":
    """log density of the centered Gaussian with covariance Q_t.

    ``t = inf`` gives the invariant density (requires ``family``, or one is
    built on the fly).  Always evaluated in log space; the linear-scale
    wrapper just exponentiates.
    """
    t = float(t)
    if math.isinf(t):
        fam = family if family is not None else cov_qinf(model)
        cov = fam.qinf
        chol = fam.qinf_chol
        logdet = fam.qinf_logdet
    else:
        if t <= 0.0:
            raise ValidationError(f"gamma density needs t > 0, got {t}")
        if family is not None:
            bundle = family.qt_bundle(t)
            chol = bundle.qt_chol
            logdet = bundle.qt_logdet
        else:
            cov = cov_qt(model, t)
            chol = np.linalg.cholesky(cov)
            logdet = 2.0 * float(np.log(np.diag(chol)).sum())
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    z = np.linalg.solve(chol, pts.T)
    out = (
        -0.5 * model.n * math.log(2.0 * math.pi)
        - 0.5 * logdet
        - 0.5 * np.einsum("ij,ij->j", z, z)
    )
    return float(out[0]) if single else out


def gamma_density(
    model: OUModel,
    t: float,
    x,
    family: "CovarianceFamily | None" = None,
) -> "float | np.ndarray":
    return np.exp(gamma_logdensity(model, t, x, family))
