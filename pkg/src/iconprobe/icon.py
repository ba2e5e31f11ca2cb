"""Registration predictors and the TwoStep / DownSample / inverse-consistent
composition operator algebra.

A registration predictor maps an image pair (moving, fixed) to a spatial
transform plus per-leaf feature taps.  Affine primitives antisymmetrize a
learned Lie-algebra prediction, which makes every primitive, and every
stack composed from them with the TSC operator, inverse consistent by
construction: predicting on the swapped pair yields the exact inverse map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .geometry import (
    AffineTransform,
    DisplacementField,
    Transform,
    Volume,
    avg_pool,
    compose,
    expm,
    identity_transform,
    sqrtm,
    warp,
    MagicError,
    TruncatedPayloadError,
    _HEADER,
)
from . import probe as probe_mod

__all__ = [
    "FeatureSpec",
    "moment_features",
    "AffineGenerator",
    "TapEntry",
    "FeatureTap",
    "RegPredictor",
    "IdentityPredictor",
    "ImportedPredictor",
    "AffinePrimitive",
    "ic_affine",
    "ts",
    "ds",
    "tsc",
    "RegStack",
    "build_affine_stack",
    "build_multires_stack",
    "TrainConfig",
    "TrainLog",
    "train_registration",
    "extract_reg_features",
    "read_affine_file",
    "write_affine_file",
    "read_displacement_file",
    "write_displacement_file",
]

AFFINE_MAGIC = b"IPAFF1\n"
DISP_MAGIC = b"IPDSP1\n"


# ---------------------------------------------------------------------------
# Pair features: per-image moment statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureSpec:
    """Which per-image statistics feed an affine generator.

    All statistics are normalized to be O(1): mean intensity, centroid in
    units of the half field of view, central second moments in units of
    (fov/4)^2, and an intensity histogram over [0, 1] as bin fractions.
    """

    mass: bool = True
    centroid: bool = True
    second_moments: bool = True
    histogram: bool = True
    hist_bins: int = 8

    @property
    def length(self) -> int:
        n = 0
        if self.mass:
            n += 1
        if self.centroid:
            n += 3
        if self.second_moments:
            n += 6
        if self.histogram:
            n += self.hist_bins
        return n


@lru_cache(maxsize=64)
def _centered_coords(grid: Grid) -> np.ndarray:
    pts = grid.points() - grid.center_mm
    pts.setflags(write=False)
    return pts


@lru_cache(maxsize=128)
def moment_features(vol: Volume, spec: FeatureSpec = FeatureSpec()) -> np.ndarray:
    """Normalized moment statistics of one volume, per the feature spec."""
    out = []
    data = vol.data.reshape(-1)
    grid = vol.grid
    total = float(data.sum())
    if spec.mass:
        out.append(total / grid.n_voxels)
    need_centroid = spec.centroid or spec.second_moments
    if need_centroid:
        coords = _centered_coords(grid)
        half_fov = grid.extent_mm / 2.0
        if total > 1e-12:
            c = (data @ coords) / total
        else:
            c = np.zeros(3)
        if spec.centroid:
            out.append(c / half_fov)
        if spec.second_moments:
            if total > 1e-12:
                dxyz = coords - c
                cov = (dxyz * (data / total)[:, None]).T @ dxyz
                sec = np.array(
                    [cov[0, 0], cov[1, 1], cov[2, 2], cov[0, 1], cov[0, 2], cov[1, 2]]
                )
            else:
                sec = np.zeros(6)
            quarter = grid.extent_mm / 4.0
            norm = np.array(
                [
                    quarter[0] * quarter[0],
                    quarter[1] * quarter[1],
                    quarter[2] * quarter[2],
                    quarter[0] * quarter[1],
                    quarter[0] * quarter[2],
                    quarter[1] * quarter[2],
                ]
            )
            out.append(sec / norm)
    if spec.histogram:
        counts, _ = np.histogram(np.clip(data, 0.0, 1.0), bins=spec.hist_bins, range=(0.0, 1.0))
        out.append(counts / data.size)
    vec = np.concatenate([np.atleast_1d(np.asarray(o, float)) for o in out]) if out else np.zeros(0)
    vec.setflags(write=False)
    return vec


def _theta_to_generator(theta: np.ndarray) -> np.ndarray:
    """12 coefficients (row-major upper 3x4 block) -> 4x4 Lie-algebra matrix."""
    g = np.zeros((4, 4))
    g[0, :] = (theta[0], theta[1], theta[2], theta[3])
    g[1, :] = (theta[4], theta[5], theta[6], theta[7])
    g[2, :] = (theta[8], theta[9], theta[10], theta[11])
    return g


class AffineGenerator:
    """Linear map from a concatenated pair-feature vector to 12 Lie-algebra coefficients."""

    __slots__ = ("weights", "feature_spec")

    def __init__(self, weights, feature_spec: FeatureSpec = FeatureSpec()):
        w = np.array(weights, dtype=np.float64)
        expected = (12, 2 * feature_spec.length)
        if w.shape != expected:
            raise ValueError(f"generator weights must have shape {expected}, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("generator weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "feature_spec", feature_spec)

    def __setattr__(self, name, value):
        raise AttributeError("AffineGenerator is immutable")

    @classmethod
    def zeros(cls, feature_spec: FeatureSpec = FeatureSpec()):
        return cls(np.zeros((12, 2 * feature_spec.length)), feature_spec)

    @classmethod
    def random(cls, feature_spec: FeatureSpec = FeatureSpec(), scale: float = 0.1, seed: int = 0):
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, scale, size=(12, 2 * feature_spec.length)), feature_spec)

    @classmethod
    def translation_matcher(cls, extent_mm, feature_spec: FeatureSpec = FeatureSpec(), gain: float = 1.0):
        """Hand-set weights that estimate translation from the centroid difference.

        With antisymmetrization this predicts exactly
        t = gain * (centroid(moving) - centroid(fixed)) in mm.
        """
        if not feature_spec.centroid:
            raise ValueError("translation matcher needs centroid features")
        half_fov = np.asarray(extent_mm, float) / 2.0
        w = np.zeros((12, 2 * feature_spec.length))
        offset = 1 if feature_spec.mass else 0
        f = feature_spec.length
        for axis, row in enumerate((3, 7, 11)):
            w[row, offset + axis] = gain * half_fov[axis]
            w[row, f + offset + axis] = -gain * half_fov[axis]
        return cls(w, feature_spec)

    def theta(self, pair_features: np.ndarray) -> np.ndarray:
        return self.weights @ pair_features

    def with_weights(self, weights) -> "AffineGenerator":
        return AffineGenerator(weights, self.feature_spec)


# ---------------------------------------------------------------------------
# Feature taps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TapEntry:
    leaf_index: int
    vector: np.ndarray
    shape: tuple

    def __post_init__(self):
        v = np.asarray(self.vector, float)
        if int(np.prod(self.shape)) != v.size:
            raise ValueError(f"tap vector length {v.size} does not match shape {self.shape}")


class FeatureTap:
    """Ordered per-leaf feature captures from one forward evaluation."""

    def __init__(self, entries):
        entries = tuple(entries)
        idx = [e.leaf_index for e in entries]
        if len(set(idx)) != len(idx):
            raise ValueError(f"duplicate leaf indices in tap: {idx}")
        self.entries = entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def get(self, leaf_index: int) -> TapEntry:
        for e in self.entries:
            if e.leaf_index == leaf_index:
                return e
        raise KeyError(f"no tap for leaf {leaf_index}")


class _EvalContext:
    """Evaluation options threaded through a stack forward pass.

    ``eta_offsets`` perturbs selected primitive leaves in their 12-dim
    Lie-coefficient space (used by finite-difference training);
    ``captures`` records per-leaf feature sensitivities when not None.
    """

    __slots__ = ("eta_offsets", "captures")

    def __init__(self, eta_offsets=None, capture=False):
        self.eta_offsets = eta_offsets or {}
        self.captures = {} if capture else None


_EMPTY_CTX = _EvalContext()


# ---------------------------------------------------------------------------
# Predictors
# ---------------------------------------------------------------------------

class RegPredictor:
    """Function object (moving, fixed) -> (transform, FeatureTap)."""

    kind = "abstract"
    inverse_consistent_by_construction = False

    @property
    def leaf_count(self) -> int:
        raise NotImplementedError

    def predict(self, moving: Volume, fixed: Volume):
        transform, vectors = self._predict(moving, fixed, _EvalContext(), 0)
        entries = [
            TapEntry(i + 1, v, (v.size,)) for i, v in enumerate(vectors)
        ]
        return transform, FeatureTap(entries)

    def __call__(self, moving, fixed):
        return self.predict(moving, fixed)

    def _predict(self, moving, fixed, ctx, slot):
        raise NotImplementedError


class IdentityPredictor(RegPredictor):
    kind = "identity"
    inverse_consistent_by_construction = True

    @property
    def leaf_count(self):
        return 1

    def _predict(self, moving, fixed, ctx, slot):
        return identity_transform(), [np.zeros(0)]


class ImportedPredictor(RegPredictor):
    """Image-independent predictor that always returns a fixed transform."""

    kind = "imported"

    def __init__(self, transform: Transform):
        if not isinstance(transform, Transform):
            raise TypeError("ImportedPredictor needs a Transform")
        self.transform = transform

    @property
    def leaf_count(self):
        return 1

    @classmethod
    def from_file(cls, path):
        raw = Path(path).read_bytes()
        if raw[: len(AFFINE_MAGIC)] == AFFINE_MAGIC:
            return cls(read_affine_file(path))
        if raw[: len(DISP_MAGIC)] == DISP_MAGIC:
            return cls(read_displacement_file(path))
        raise MagicError(f"not an affine or displacement transform file: {raw[:8]!r}")

    def _predict(self, moving, fixed, ctx, slot):
        return self.transform, [np.zeros(0)]


class AffinePrimitive(RegPredictor):
    """Inverse-consistent affine layer: expm of the antisymmetrized prediction.

    theta(A, B) is the generator's raw 12-dim output on the concatenated
    (A-features, B-features) vector; the layer exponentiates
    (theta(A,B) - theta(B,A)) / 2, which flips sign exactly under argument
    swap, so the predicted maps for (A,B) and (B,A) are exact inverses.
    """

    kind = "affine_primitive"
    inverse_consistent_by_construction = True

    def __init__(self, generator: AffineGenerator):
        self.generator = generator

    @property
    def leaf_count(self):
        return 1

    def eta(self, moving: Volume, fixed: Volume) -> np.ndarray:
        """Antisymmetrized 12-dim Lie coefficients for the pair."""
        spec = self.generator.feature_spec
        fa = moment_features(moving, spec)
        fb = moment_features(fixed, spec)
        pair = np.concatenate([fa, fb])
        pair_swapped = np.concatenate([fb, fa])
        theta_ab = self.generator.theta(pair)
        theta_ba = self.generator.theta(pair_swapped)
        return (theta_ab - theta_ba) / 2.0

    def _predict(self, moving, fixed, ctx, slot):
        spec = self.generator.feature_spec
        fa = moment_features(moving, spec)
        fb = moment_features(fixed, spec)
        pair = np.concatenate([fa, fb])
        pair_swapped = np.concatenate([fb, fa])
        theta_ab = self.generator.theta(pair)
        theta_ba = self.generator.theta(pair_swapped)
        eta = (theta_ab - theta_ba) / 2.0
        off = ctx.eta_offsets.get(slot)
        if off is not None:
            eta = eta + off
        if ctx.captures is not None:
            ctx.captures[slot] = (pair - pair_swapped) / 2.0
        gen = _theta_to_generator(eta)
        transform = AffineTransform(expm(gen), generator=gen)
        return transform, [np.concatenate([pair, eta])]


def ic_affine(generator: AffineGenerator) -> AffinePrimitive:
    """Wrap a generator as an inverse-consistent affine predictor."""
    return AffinePrimitive(generator)


# ---------------------------------------------------------------------------
# Composition operators
# ---------------------------------------------------------------------------

class _TSNode(RegPredictor):
    kind = "composite"
    inverse_consistent_by_construction = False

    def __init__(self, first: RegPredictor, second: RegPredictor):
        self.first = first
        self.second = second

    @property
    def leaf_count(self):
        return self.first.leaf_count + self.second.leaf_count

    def _predict(self, moving, fixed, ctx, slot):
        t1, taps1 = self.first._predict(moving, fixed, ctx, slot)
        warped = warp(moving, t1, fixed.grid)
        t2, taps2 = self.second._predict(warped, fixed, ctx, slot + self.first.leaf_count)
        return compose(t1, t2), taps1 + taps2


class _DSNode(RegPredictor):
    kind = "composite"

    def __init__(self, inner: RegPredictor):
        self.inner = inner

    @property
    def inverse_consistent_by_construction(self):
        return self.inner.inverse_consistent_by_construction

    @property
    def leaf_count(self):
        return self.inner.leaf_count

    def _predict(self, moving, fixed, ctx, slot):
        return self.inner._predict(avg_pool(moving, 2), avg_pool(fixed, 2), ctx, slot)


def _half_transform(t: Transform) -> AffineTransform:
    """Principal half-power of an affine map: expm(theta/2) when the
    generator is known, Denman-Beavers square root otherwise."""
    if not isinstance(t, AffineTransform):
        raise TypeError("half-powers are only defined for affine transforms here")
    if t.generator is not None:
        g = t.generator / 2.0
        return AffineTransform(expm(g), generator=g)
    return AffineTransform(sqrtm(t.matrix))


@lru_cache(maxsize=1)
def _probe_pair():
    rng = np.random.default_rng(1789)
    a = Volume(rng.random((8, 8, 8)), (1.0, 1.0, 1.0), (-3.5, -3.5, -3.5))
    b = Volume(rng.random((8, 8, 8)), (1.0, 1.0, 1.0), (-3.5, -3.5, -3.5))
    return a, b


def _check_inverse_consistent(pred: RegPredictor, tol: float = 1e-8) -> None:
    if pred.inverse_consistent_by_construction:
        return
    a, b = _probe_pair()
    t_ab, _ = pred.predict(a, b)
    t_ba, _ = pred.predict(b, a)
    if not (isinstance(t_ab, AffineTransform) and isinstance(t_ba, AffineTransform)):
        raise ValueError("inverse-consistency probe requires affine outputs")
    err = np.max(np.abs(t_ab.matrix @ t_ba.matrix - np.eye(4)))
    if err >= tol:
        raise ValueError(
            f"predictor is not inverse consistent on the probe pair (error {err:.3e})"
        )


class _TSCNode(RegPredictor):
    kind = "composite"
    inverse_consistent_by_construction = True

    def __init__(self, first: RegPredictor, second: RegPredictor):
        _check_inverse_consistent(first)
        _check_inverse_consistent(second)
        self.first = first
        self.second = second

    @property
    def leaf_count(self):
        return self.first.leaf_count + self.second.leaf_count

    def _predict(self, moving, fixed, ctx, slot):
        t_ab, taps1 = self.first._predict(moving, fixed, ctx, slot)
        t_ba, _ = self.first._predict(fixed, moving, ctx, slot)
        half_ab = _half_transform(t_ab)
        half_ba = _half_transform(t_ba)
        moving_half = warp(moving, half_ab, moving.grid)
        fixed_half = warp(fixed, half_ba, fixed.grid)
        t2, taps2 = self.second._predict(
            moving_half, fixed_half, ctx, slot + self.first.leaf_count
        )
        result = compose(half_ab, compose(t2, half_ba.inverse()))
        return result, taps1 + taps2


def ts(first: RegPredictor, second: RegPredictor) -> RegPredictor:
    """TwoStep: warp the moving image by the first prediction, then refine.

    Result transform is first_t composed with the residual prediction, so
    warped_moving = (moving o first_t) o residual_t.
    """
    return _TSNode(first, second)


def ds(inner: RegPredictor) -> RegPredictor:
    """DownSample: evaluate the inner predictor on 2x average-pooled inputs.

    The returned transform acts on physical coordinates, so it is valid at
    full resolution without rescaling.
    """
    return _DSNode(inner)


def tsc(first: RegPredictor, second: RegPredictor) -> RegPredictor:
    """Inverse-consistent composition of two inverse-consistent predictors.

    TSC{F, S}[A, B] = F[A,B]^(1/2) o S[A o F[A,B]^(1/2), B o F[B,A]^(1/2)]
    o (F[B,A]^(1/2))^(-1).  Children are verified inverse consistent at
    construction (structurally, or on a fixed probe pair).
    """
    return _TSCNode(first, second)


# ---------------------------------------------------------------------------
# Stacks
# ---------------------------------------------------------------------------

class RegStack(RegPredictor):
    """Expression tree over predictors with per-leaf resolution annotations."""

    kind = "composite"

    def __init__(self, root: RegPredictor):
        self.root = root
        leaves = []
        resolutions = []

        def visit(node, scale):
            if isinstance(node, _TSNode) or isinstance(node, _TSCNode):
                visit(node.first, scale)
                visit(node.second, scale)
            elif isinstance(node, _DSNode):
                visit(node.inner, scale * 0.5)
            elif isinstance(node, RegStack):
                visit(node.root, scale)
            else:
                leaves.append(node)
                resolutions.append(scale)

        visit(root, 1.0)
        self.leaves = tuple(leaves)
        self.leaf_resolutions = tuple(resolutions)

    @property
    def inverse_consistent_by_construction(self):
        return self.root.inverse_consistent_by_construction

    @property
    def leaf_count(self):
        return self.root.leaf_count

    def _predict(self, moving, fixed, ctx, slot):
        return self.root._predict(moving, fixed, ctx, slot)

    def primitive_slots(self):
        """Indices (0-based slots) of trainable affine-primitive leaves."""
        return [i for i, leaf in enumerate(self.leaves) if isinstance(leaf, AffinePrimitive)]


def build_affine_stack(generators) -> RegStack:
    """Right-nested inverse-consistent composition of exactly 5 affine layers:
    TSC{P1, TSC{P2, TSC{P3, TSC{P4, P5}}}}."""
    generators = list(generators)
    if len(generators) != 5:
        raise ValueError(f"affine stack needs exactly 5 generators, got {len(generators)}")
    prims = [AffinePrimitive(g) for g in generators]
    node = tsc(prims[3], prims[4])
    node = tsc(prims[2], node)
    node = tsc(prims[1], node)
    node = tsc(prims[0], node)
    return RegStack(node)


def build_multires_stack(leaves) -> RegStack:
    """Multiresolution TwoStep topology TS{TS{DS{TS{DS{P1}, P2}}, P3}, P4};
    leaves operate at 1/4, 1/2, 1, and 1 of the input resolution."""
    leaves = list(leaves)
    if len(leaves) != 4:
        raise ValueError(f"multires stack needs exactly 4 leaves, got {len(leaves)}")
    inner = ts(ds(leaves[0]), leaves[1])
    node = ts(ds(inner), leaves[2])
    node = ts(node, leaves[3])
    return RegStack(node)


def extract_reg_features(stack: RegStack, moving: Volume, fixed: Volume, leaf_select=None) -> FeatureTap:
    """One forward evaluation, returning taps for the selected leaves only."""
    n = stack.leaf_count
    if leaf_select is None:
        leaf_select = set(range(1, n + 1))
    leaf_select = set(int(i) for i in leaf_select)
    unknown = leaf_select - set(range(1, n + 1))
    if unknown:
        raise ValueError(f"unknown leaf indices {sorted(unknown)}; stack has leaves 1..{n}")
    _, taps = stack.predict(moving, fixed)
    return FeatureTap([e for e in taps if e.leaf_index in leaf_select])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Registration training settings.

    Volumes are average-pooled until every axis is <= train_resolution
    before the loss is evaluated; transforms act on physical coordinates,
    so the result applies unchanged at the original resolution.
    """

    epochs: int = 180
    train_resolution: int = 88
    lr: float = 0.03
    weight_decay: float = 0.0
    fd_step: float = 1e-4
    seed: int = 0
    init_scale: float = 0.0
    grad_mode: str = "factored"  # "factored" | "per_parameter"
    stop_loss: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.grad_mode not in ("factored", "per_parameter"):
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")


@dataclass
class TrainLog:
    raw: list = field(default_factory=list)
    smoothed: list = field(default_factory=list)

    def append(self, loss: float):
        self.raw.append(loss)
        best = self.smoothed[-1] if self.smoothed else loss
        self.smoothed.append(min(best, loss))


def _pool_to(vol: Volume, max_dim: int) -> Volume:
    while max(vol.shape) > max_dim and min(vol.shape) >= 2:
        vol = avg_pool(vol, 2)
    return vol


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    with np.errstate(over="ignore"):
        d = a - b
        return float(np.mean(d * d))


class _StackEvaluator:
    """Loss evaluation with per-leaf eta offsets, via the generic stack forward."""

    def __init__(self, stack: RegStack, pairs):
        self.stack = stack
        self.pairs = pairs

    def loss(self, eta_offsets=None, capture=False):
        ctx = _EvalContext(eta_offsets=eta_offsets, capture=capture)
        total = 0.0
        captures = []
        for idx, (moving, fixed) in enumerate(self.pairs):
            t, _ = self.stack._predict(moving, fixed, ctx, 0)
            warped = warp(moving, t, fixed.grid)
            l = _mse(warped.data, fixed.data)
            if not np.isfinite(l):
                raise ValueError(f"non-finite training loss on pair {idx}")
            total += l
            if capture:
                captures.append(dict(ctx.captures))
                ctx.captures.clear()
        return total / len(self.pairs), captures


class _AffineTSCFastEval:
    """Cached forward/finite-difference evaluation for the right-nested
    TSC-over-primitives topology produced by build_affine_stack.

    Performs exactly the operations of the generic node recursion (level by
    level iterated warps), but caches the per-level images and half maps so
    a finite-difference probe at level g only recomputes levels below g.
    """

    def __init__(self, prims, pairs):
        self.prims = prims
        self.pairs = pairs
        self.n = len(prims)
        self._features = moment_features.__wrapped__  # skip memo cache in the hot loop

    def _forward_pair(self, pair, weights, start=0, state=None, eta_override=None):
        """Evaluate one pair; weights is a list of (12, 2F) arrays.

        state carries per-level caches (input images a/b, feature diff d,
        eta, half maps) from a previous full forward of the same pair;
        levels < start are reused.  eta_override = (level, vector) replaces
        that level's eta, reusing that level's cached input images.
        """
        moving, fixed = pair
        n = self.n
        if state is None:
            state = {k: [None] * n for k in ("a", "b", "d", "eta", "half", "half_inv")}
            start = 0
        else:
            state = {k: list(v) for k, v in state.items()}
        for g in range(start, n):
            if g == 0:
                a_g, b_g = moving, fixed
            elif g == start:
                a_g, b_g = state["a"][g], state["b"][g]  # inputs unchanged by this level's eta
            else:
                a_g = warp(state["a"][g - 1], AffineTransform(state["half"][g - 1]))
                b_g = warp(state["b"][g - 1], AffineTransform(state["half_inv"][g - 1]))
            state["a"][g], state["b"][g] = a_g, b_g
            if eta_override is not None and eta_override[0] == g:
                eta = eta_override[1]
            else:
                spec = self.prims[g].generator.feature_spec
                fa = self._features(a_g, spec)
                fb = self._features(b_g, spec)
                pair_vec = np.concatenate([fa, fb])
                pair_swapped = np.concatenate([fb, fa])
                d = (pair_vec - pair_swapped) / 2.0
                state["d"][g] = d
                eta = weights[g] @ d
            state["eta"][g] = eta
            gen = _theta_to_generator(eta)
            if g < n - 1:
                state["half"][g] = expm(gen / 2.0)
                state["half_inv"][g] = expm(-gen / 2.0)
            else:
                state["half"][g] = expm(gen)  # last leaf enters whole
        # fold H0 (H1 (... E_last ...) H1) H0; the right factors are the
        # inverses of the swapped-direction halves, which equal the halves
        m = state["half"][n - 1]
        for g in range(n - 2, -1, -1):
            m = state["half"][g] @ m @ state["half"][g]
        warped = warp(moving, AffineTransform(m), fixed.grid)
        loss = _mse(warped.data, fixed.data)
        return loss, state

    def loss_and_states(self, weights):
        total = 0.0
        states = []
        for idx, pair in enumerate(self.pairs):
            l, st = self._forward_pair(pair, weights)
            if not np.isfinite(l):
                raise ValueError(f"non-finite training loss on pair {idx}")
            total += l
            states.append(st)
        return total / len(self.pairs), states

    def weight_gradients(self, weights, states, h):
        """Mean over pairs of the factored gradient: central differences of
        the pair loss in each level's 12-dim eta space, outer-multiplied
        with that pair's antisymmetrized feature vector."""
        n = self.n
        grads = [np.zeros(w.shape) for w in weights]
        for pair, st in zip(self.pairs, states):
            for g in range(n):
                base_eta = st["eta"][g]
                dldeta = np.zeros(12)
                for i in range(12):
                    delta = np.zeros(12)
                    delta[i] = h
                    lp, _ = self._forward_pair(
                        pair, weights, start=g, state=st, eta_override=(g, base_eta + delta)
                    )
                    lm, _ = self._forward_pair(
                        pair, weights, start=g, state=st, eta_override=(g, base_eta - delta)
                    )
                    dldeta[i] = (lp - lm) / (2.0 * h)
                grads[g] += np.outer(dldeta, st["d"][g])
        return [g / len(self.pairs) for g in grads]


def train_registration(stack: RegStack, pairs, cfg: TrainConfig | None = None):
    """Fit the stack's affine-generator weights by minimizing the mean squared
    intensity error of warp(moving) against fixed over the given pairs.

    Optimization is AdamW on the flattened generator weights; gradients come
    from central finite differences.  The default "factored" mode differences
    in each primitive's 12-dim output space and applies the exact chain rule
    of the linear generator map; "per_parameter" differences every weight
    entry directly (slow, used for cross-checking).  Returns
    (trained_stack, TrainLog); deterministic for a fixed config.
    """
    cfg = cfg or TrainConfig()
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one training pair")
    slots = stack.primitive_slots()
    if not slots:
        raise ValueError("stack has no trainable affine-primitive leaves")

    train_pairs = [
        (_pool_to(m, cfg.train_resolution), _pool_to(f, cfg.train_resolution)) for m, f in pairs
    ]

    rng = np.random.default_rng(cfg.seed)
    weights = []
    for s in slots:
        w = stack.leaves[s].generator.weights.copy()
        if cfg.init_scale > 0:
            w = w + rng.normal(0.0, cfg.init_scale, size=w.shape)
        weights.append(w)
    shapes = [w.shape for w in weights]
    sizes = [w.size for w in weights]

    def unflatten(flat):
        out = []
        off = 0
        for shp, sz in zip(shapes, sizes):
            out.append(flat[off : off + sz].reshape(shp))
            off += sz
        return out

    def rebuild(ws):
        new_leaves = {}
        for s, w in zip(slots, ws):
            new_leaves[s] = AffinePrimitive(stack.leaves[s].generator.with_weights(w))
        return _replace_leaves(stack, new_leaves)

    fast = _unroll_affine_tsc(stack)
    flat = np.concatenate([w.ravel() for w in weights])
    state = probe_mod.AdamWState.init(flat.shape, lr=cfg.lr, weight_decay=cfg.weight_decay)
    log = TrainLog()

    for epoch in range(cfg.epochs):
        ws = unflatten(flat)
        if fast is not None and cfg.grad_mode == "factored":
            evaluator = _AffineTSCFastEval([stack.leaves[s] for s in slots], train_pairs)
            loss, states = evaluator.loss_and_states(ws)
            log.append(loss)
            if loss <= cfg.stop_loss:
                break
            grads = evaluator.weight_gradients(ws, states, cfg.fd_step)
            grad_flat = np.concatenate([g.ravel() for g in grads])
        else:
            current = rebuild(ws)
            evaluator = _StackEvaluator(current, train_pairs)
            loss, captures = evaluator.loss(capture=True)
            log.append(loss)
            if loss <= cfg.stop_loss:
                break
            if cfg.grad_mode == "per_parameter":
                grad_flat = np.zeros(flat.shape)
                for k in range(flat.size):
                    bumped = flat.copy()
                    bumped[k] += cfg.fd_step
                    lp, _ = _StackEvaluator(rebuild(unflatten(bumped)), train_pairs).loss()
                    bumped[k] -= 2 * cfg.fd_step
                    lm, _ = _StackEvaluator(rebuild(unflatten(bumped)), train_pairs).loss()
                    grad_flat[k] = (lp - lm) / (2.0 * cfg.fd_step)
            else:
                grad_flat = _factored_gradient_generic(
                    current, train_pairs, slots, ws, captures, cfg.fd_step
                )
        flat, state = probe_mod.adamw_step(flat, grad_flat, state)

    trained = rebuild(unflatten(flat))
    return trained, log


def _factored_gradient_generic(stack, train_pairs, slots, ws, captures, h):
    """Eta-space central differences through the generic forward path."""
    grads = [np.zeros(w.shape) for w in ws]
    for pidx, (moving, fixed) in enumerate(train_pairs):
        pair_list = [(moving, fixed)]
        evaluator = _StackEvaluator(stack, pair_list)
        for gi, s in enumerate(slots):
            d_vec = captures[pidx][s]
            for i in range(12):
                delta = np.zeros(12)
                delta[i] = h
                lp, _ = evaluator.loss(eta_offsets={s: delta})
                lm, _ = evaluator.loss(eta_offsets={s: -delta})
                dldeta = (lp - lm) / (2.0 * h)
                grads[gi][i, :] += dldeta * d_vec
    return np.concatenate([(g / len(train_pairs)).ravel() for g in grads])


def _replace_leaves(stack: RegStack, new_leaves: dict) -> RegStack:
    """Rebuild the stack's tree with some leaves replaced (by slot index)."""
    counter = [0]

    def rebuild(node):
        if isinstance(node, _TSNode):
            return _TSNode(rebuild(node.first), rebuild(node.second))
        if isinstance(node, _TSCNode):
            first = rebuild(node.first)
            second = rebuild(node.second)
            out = _TSCNode.__new__(_TSCNode)
            out.first = first
            out.second = second
            return out
        if isinstance(node, _DSNode):
            return _DSNode(rebuild(node.inner))
        if isinstance(node, RegStack):
            return rebuild(node.root)
        slot = counter[0]
        counter[0] += 1
        return new_leaves.get(slot, node)

    return RegStack(rebuild(stack.root))


def _unroll_affine_tsc(stack: RegStack):
    """Return the primitive list if the stack is right-nested TSC over
    affine primitives (the build_affine_stack topology), else None."""
    prims = []
    node = stack.root
    while isinstance(node, _TSCNode):
        if not isinstance(node.first, AffinePrimitive):
            return None
        prims.append(node.first)
        node = node.second
    if not isinstance(node, AffinePrimitive):
        return None
    prims.append(node)
    if len(prims) != len(stack.leaves):
        return None
    return prims


# ---------------------------------------------------------------------------
# Transform file formats
# ---------------------------------------------------------------------------

def write_affine_file(transform: AffineTransform, path) -> None:
    """Affine interchange: magic then 16 little-endian f64, row-major."""
    Path(path).write_bytes(AFFINE_MAGIC + transform.matrix.astype("<f8").tobytes())


def read_affine_file(path) -> AffineTransform:
    raw = Path(path).read_bytes()
    if raw[: len(AFFINE_MAGIC)] != AFFINE_MAGIC:
        raise MagicError(f"malformed affine magic: {raw[:8]!r}")
    body = raw[len(AFFINE_MAGIC) :]
    if len(body) < 16 * 8:
        raise TruncatedPayloadError(f"affine payload has {len(body)} bytes, needs 128")
    m = np.frombuffer(body[: 16 * 8], dtype="<f8").reshape(4, 4)
    return AffineTransform(m)


def write_displacement_file(field_t: DisplacementField, path) -> None:
    """Dense displacement interchange: volume-format header, then three
    x-fastest f32 component planes (dx, dy, dz)."""
    nx, ny, nz = field_t.vectors.shape[:3]
    header = _HEADER.pack(nx, ny, nz, *field_t.spacing, *field_t.origin)
    planes = b"".join(
        np.asfortranarray(field_t.vectors[..., c].astype("<f4")).tobytes(order="F")
        for c in range(3)
    )
    Path(path).write_bytes(DISP_MAGIC + header + planes)


def read_displacement_file(path) -> DisplacementField:
    raw = Path(path).read_bytes()
    if raw[: len(DISP_MAGIC)] != DISP_MAGIC:
        raise MagicError(f"malformed displacement magic: {raw[:8]!r}")
    off = len(DISP_MAGIC)
    if len(raw) < off + _HEADER.size:
        raise TruncatedPayloadError("file shorter than the displacement header")
    nx, ny, nz, sx, sy, sz, ox, oy, oz = _HEADER.unpack_from(raw, off)
    off += _HEADER.size
    count = nx * ny * nz
    expected = count * 4 * 3
    body = raw[off:]
    if len(body) < expected:
        raise TruncatedPayloadError(f"displacement payload has {len(body)} bytes, needs {expected}")
    vecs = np.empty((nx, ny, nz, 3))
    for c in range(3):
        plane = np.frombuffer(body[c * count * 4 : (c + 1) * count * 4], dtype="<f4")
        vecs[..., c] = plane.reshape((nx, ny, nz), order="F")
    return DisplacementField(vecs, (sx, sy, sz), (ox, oy, oz))
