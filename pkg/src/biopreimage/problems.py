"""Attack problems: stolen material turned into constrained programs.

Each builder produces an immutable :class:`AttackProblem` describing one
of the constrained programs the solver knows how to attack:

* feature phase - convex QP over the feature vector (sign constraints
  on its projections, closest to the attacker's own feature);
* image phase - recover an image whose squared gradient magnitudes
  match a target feature vector;
* merged - both stages in one program over the image, with auxiliary
  magnitude variables;
* multi-auth - merged program against the Hamming center of several
  victims' templates, under the attacker's own password;
* multi-collision - merged program stacking several victims' sign
  constraints (their passwords are known).

Strict "< 0" sign constraints are encoded as "<= -delta" with a small
positive margin: numerical solvers cannot express strictness, and the
margin also shields the final binarization from round-off flips.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .pipeline import GrayImage, Template, binarize, hamming_distance, project, sobel
from .prng import derive_matrix

DEFAULT_MARGIN_SCALE = 1e-6

#: Support size above which the Hamming-center search falls back from
#: exhaustive enumeration to local search.
_EXHAUSTIVE_BITS = 24

_POPCOUNT16 = np.array([bin(i).count("1") for i in range(1 << 16)], dtype=np.uint8)


class ProblemError(ValueError):
    """Inconsistent dimensions or malformed attack inputs."""


class ProblemKind(Enum):
    FEATURE_PHASE = "feature_phase"
    IMAGE_PHASE = "image_phase"
    MERGED = "merged"
    MULTI_AUTH = "multi_auth"
    MULTI_COLLISION = "multi_collision"


@dataclass(frozen=True)
class SignConstraintSet:
    """One victim's sign pattern: which projection columns must come out
    negative (bit 0) and which non-negative (bit 1)."""

    matrix: np.ndarray
    zero_idx: np.ndarray
    one_idx: np.ndarray
    template: Template
    password: bytes | None = None
    orthonormalize: bool = False

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.float64)
        m = len(self.template)
        if matrix.ndim != 2 or matrix.shape[1] != m:
            raise ProblemError(f"matrix shape {matrix.shape} does not fit {m}-bit template")
        zero_idx = np.asarray(self.zero_idx, dtype=np.intp)
        one_idx = np.asarray(self.one_idx, dtype=np.intp)
        merged = np.concatenate([zero_idx, one_idx])
        if (
            merged.size != m
            or len(np.unique(merged)) != m
            or (m and (merged.min() < 0 or merged.max() >= m))
        ):
            raise ProblemError("zero/one index sets must partition the template columns")
        if (self.template.bits[zero_idx] != 0).any() or (self.template.bits[one_idx] != 1).any():
            raise ProblemError("index sets disagree with template bits")
        for name, arr in (("matrix", matrix), ("zero_idx", zero_idx), ("one_idx", one_idx)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def from_template(
        cls,
        template: Template,
        matrix: np.ndarray,
        password: bytes | None = None,
        orthonormalize: bool = False,
    ) -> "SignConstraintSet":
        bits = template.bits
        return cls(
            matrix=matrix,
            zero_idx=np.flatnonzero(bits == 0),
            one_idx=np.flatnonzero(bits == 1),
            template=template,
            password=password,
            orthonormalize=orthonormalize,
        )

    @property
    def n(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def m(self) -> int:
        return int(self.matrix.shape[1])


@dataclass(frozen=True)
class AttackProblem:
    """Immutable description of one constrained program."""

    kind: ProblemKind
    height: int
    width: int
    delta: float
    anchor_image: GrayImage | None = None
    anchor_feature: np.ndarray | None = None
    constraint_sets: tuple[SignConstraintSet, ...] = ()
    target_feature: np.ndarray | None = None

    def __post_init__(self):
        if self.delta <= 0:
            raise ProblemError("margin delta must be positive")
        n = self.height * self.width
        for cs in self.constraint_sets:
            if cs.n != n:
                raise ProblemError(
                    f"constraint matrix row count {cs.n} does not match pixel count {n}"
                )
        if self.kind is ProblemKind.MULTI_COLLISION:
            if len(self.constraint_sets) < 2:
                raise ProblemError("multi-collision needs at least two victims")
        elif self.kind is ProblemKind.IMAGE_PHASE:
            if self.target_feature is None or len(self.target_feature) != n:
                raise ProblemError("image phase needs a target feature of pixel-count length")
        elif len(self.constraint_sets) != 1:
            raise ProblemError(f"{self.kind.value} expects exactly one constraint set")
        if self.anchor_feature is not None:
            af = np.asarray(self.anchor_feature, dtype=np.float64).copy()
            if af.shape != (n,):
                raise ProblemError(f"anchor feature length {af.shape} != pixel count {n}")
            af.flags.writeable = False
            object.__setattr__(self, "anchor_feature", af)
        if self.target_feature is not None:
            tf = np.asarray(self.target_feature, dtype=np.float64).copy()
            tf.flags.writeable = False
            object.__setattr__(self, "target_feature", tf)

    @property
    def n(self) -> int:
        return self.height * self.width


def default_margin(*matrices: np.ndarray) -> float:
    """Margin used to encode strict negativity: 1e-6 times the largest
    column norm across the projection matrices involved."""
    top = 0.0
    for mat in matrices:
        norms = np.linalg.norm(np.asarray(mat, dtype=np.float64), axis=0)
        if norms.size:
            top = max(top, float(norms.max()))
    if top == 0.0:
        raise ProblemError("cannot derive a margin from all-zero matrices")
    return DEFAULT_MARGIN_SCALE * top


def _feature_dims(feature: np.ndarray) -> int:
    feature = np.asarray(feature, dtype=np.float64)
    if feature.ndim != 1:
        raise ProblemError("feature must be a flat vector")
    return feature.shape[0]


def build_feature_phase(
    anchor_feature: np.ndarray,
    template: Template,
    matrix: np.ndarray,
    delta: float | None = None,
    password: bytes | None = None,
    orthonormalize: bool = False,
) -> AttackProblem:
    """Closest non-negative feature vector whose projections carry the
    target sign pattern.  Convex; image dims are carried as 1 x n."""
    n = _feature_dims(anchor_feature)
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (n, len(template)):
        raise ProblemError(f"matrix shape {matrix.shape} != ({n}, {len(template)})")
    cs = SignConstraintSet.from_template(template, matrix, password, orthonormalize)
    return AttackProblem(
        kind=ProblemKind.FEATURE_PHASE,
        height=1,
        width=n,
        delta=default_margin(matrix) if delta is None else delta,
        anchor_feature=anchor_feature,
        constraint_sets=(cs,),
    )


def build_image_phase(anchor_image: GrayImage, target_feature: np.ndarray) -> AttackProblem:
    """Integer image whose squared gradient magnitudes equal the target
    feature squared, closest to the anchor image."""
    if _feature_dims(target_feature) != anchor_image.n:
        raise ProblemError(
            f"target feature length {len(target_feature)} != pixel count {anchor_image.n}"
        )
    return AttackProblem(
        kind=ProblemKind.IMAGE_PHASE,
        height=anchor_image.height,
        width=anchor_image.width,
        delta=DEFAULT_MARGIN_SCALE,
        anchor_image=anchor_image,
        target_feature=target_feature,
    )


def build_merged(
    anchor_image: GrayImage,
    template: Template,
    matrix: np.ndarray | None = None,
    delta: float | None = None,
    password: bytes | None = None,
    orthonormalize: bool = False,
) -> AttackProblem:
    """Single program over the image: auxiliary magnitude variables tied
    to the squared gradients, sign constraints on their projections.

    Either the projection matrix or the password it derives from must be
    given; with only the password the matrix is re-derived here.
    """
    if matrix is None:
        if password is None:
            raise ProblemError("need a projection matrix or a password to derive one")
        matrix = derive_matrix(password, anchor_image.n, len(template), orthonormalize)
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (anchor_image.n, len(template)):
        raise ProblemError(f"matrix shape {matrix.shape} != ({anchor_image.n}, {len(template)})")
    cs = SignConstraintSet.from_template(template, matrix, password, orthonormalize)
    return AttackProblem(
        kind=ProblemKind.MERGED,
        height=anchor_image.height,
        width=anchor_image.width,
        delta=default_margin(matrix) if delta is None else delta,
        anchor_image=anchor_image,
        constraint_sets=(cs,),
    )


def build_multi_auth(
    anchor_image: GrayImage,
    center: Template,
    matrix: np.ndarray | None = None,
    delta: float | None = None,
    password: bytes | None = None,
    orthonormalize: bool = False,
) -> AttackProblem:
    """Merged program whose target is a Hamming-center template and whose
    matrix belongs to the attacker; no victim password is involved."""
    base = build_merged(anchor_image, center, matrix, delta, password, orthonormalize)
    return AttackProblem(
        kind=ProblemKind.MULTI_AUTH,
        height=base.height,
        width=base.width,
        delta=base.delta,
        anchor_image=base.anchor_image,
        constraint_sets=base.constraint_sets,
    )


def build_multi_collision(
    anchor_image: GrayImage,
    victims: list[tuple[Template, bytes | str]],
    delta: float | None = None,
    orthonormalize: bool = False,
) -> AttackProblem:
    """One program stacking every victim's sign constraints over a single
    magnitude vector; each victim's matrix comes from their password.

    Warns when the combined template size exceeds the pixel count: the
    stacked system may then be infeasible (see :func:`capacity`).
    """
    if len(victims) < 2:
        raise ProblemError("multi-collision needs at least two (template, password) pairs")
    n = anchor_image.n
    sets = []
    for template, password in victims:
        if isinstance(password, str):
            password = password.encode("utf-8")
        matrix = derive_matrix(password, n, len(template), orthonormalize)
        sets.append(
            SignConstraintSet.from_template(template, matrix, password, orthonormalize)
        )
    total_bits = sum(cs.m for cs in sets)
    if total_bits > n:
        warnings.warn(
            f"stacked template bits ({total_bits}) exceed feature dimension ({n}); "
            f"the combined system may be infeasible",
            stacklevel=2,
        )
    return AttackProblem(
        kind=ProblemKind.MULTI_COLLISION,
        height=anchor_image.height,
        width=anchor_image.width,
        delta=default_margin(*(cs.matrix for cs in sets)) if delta is None else delta,
        anchor_image=anchor_image,
        constraint_sets=tuple(sets),
    )


# ---------------------------------------------------------------------------
# Hamming center


@dataclass(frozen=True)
class CenterResult:
    """Minimax center over the covered subset of the input templates.

    ``members`` holds indices into the input list; every member is
    within ``radius`` of ``center``.
    """

    center: Template
    radius: int
    members: tuple[int, ...]


def _popcount(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64)
    total = _POPCOUNT16[(x & np.uint64(0xFFFF)).astype(np.intp)].astype(np.int64)
    for shift in (16, 32, 48):
        total += _POPCOUNT16[((x >> np.uint64(shift)) & np.uint64(0xFFFF)).astype(np.intp)]
    return total


def _minimax_center(bits: np.ndarray) -> tuple[np.ndarray, int]:
    """Exact or local-search minimax center of a (t, m) bit matrix.

    Only positions where the templates disagree matter; an optimal
    center always copies the unanimous bits.  Ties prefer the center
    that agrees with the first template on the lowest-index disagreeing
    positions.
    """
    t, m = bits.shape
    base = bits[0].copy()
    support = np.flatnonzero((bits != bits[0]).any(axis=0))
    k = support.size
    if k == 0:
        return base, 0

    # Encode disagreement patterns relative to the first template as
    # k-bit integers, lowest support index in the most significant bit,
    # so ascending numeric order matches the tie-break preference.
    weights = (1 << np.arange(k - 1, -1, -1, dtype=np.uint64)).astype(np.uint64)
    codes = ((bits[:, support] != base[support]).astype(np.uint64) @ weights).astype(np.uint64)

    if k <= _EXHAUSTIVE_BITS:
        candidates = np.arange(1 << k, dtype=np.uint64)
        radius = np.zeros(1 << k, dtype=np.int64)
        for code in codes:
            np.maximum(radius, _popcount(candidates ^ code), out=radius)
        best = int(np.argmin(radius))
        flip = np.array([(best >> int(s)) & 1 for s in range(k - 1, -1, -1)], dtype=np.uint8)
        center = base.copy()
        center[support] ^= flip
        return center, int(radius[best])

    # Large support: majority vote start, then steepest-descent bit flips.
    ones = bits.sum(axis=0)
    center = np.where(2 * ones > t, 1, np.where(2 * ones < t, 0, bits[0])).astype(np.uint8)
    dist = (bits != center).sum(axis=1)
    for _ in range(4 * m):
        radius = int(dist.max())
        best_pos, best_key = -1, (radius, int(dist.sum()))
        for pos in support:
            delta = np.where(bits[:, pos] == center[pos], 1, -1)
            nd = dist + delta
            key = (int(nd.max()), int(nd.sum()))
            if key < best_key:
                best_key, best_pos = key, pos
        if best_pos < 0:
            break
        dist = dist + np.where(bits[:, best_pos] == center[best_pos], 1, -1)
        center[best_pos] ^= 1
    return center, int(dist.max())


def hamming_center(templates: list[Template], epsilon: int) -> CenterResult:
    """Center template covering as many inputs as possible within radius
    ``epsilon``.

    The minimax center of the full set is returned when its radius fits;
    otherwise the template farthest from the current center is dropped
    (greedily, first occurrence on ties) and the center recomputed until
    the survivors are covered.
    """
    if not templates:
        raise ProblemError("need at least one template")
    if epsilon < 0:
        raise ProblemError("epsilon must be non-negative")
    m = len(templates[0])
    if any(len(t) != m for t in templates):
        raise ProblemError("templates must share one length")
    bits = np.stack([t.bits for t in templates]).astype(np.uint8)
    alive = list(range(len(templates)))
    while True:
        center, radius = _minimax_center(bits[alive])
        if radius <= epsilon or len(alive) == 1:
            return CenterResult(Template(center), radius, tuple(alive))
        dist = (bits[alive] != center).sum(axis=1)
        alive.pop(int(np.argmax(dist)))


# ---------------------------------------------------------------------------
# Multi-collision capacity analysis


def independence_probability(n: int, k: int, eta: int) -> float:
    """Probability that k random vectors of dimension n, with eta bits of
    numeric precision per coordinate, are linearly independent.

    Product over i = 2..k of (2^(eta(n-i+1)) - 1) / 2^(eta(n-i+1)),
    evaluated in log space; the empty product (k = 1) is 1.
    """
    if n < 1 or k < 1 or eta < 1:
        raise ProblemError("n, k, eta must be positive")
    log_p = 0.0
    for i in range(2, k + 1):
        exponent = eta * (n - i + 1)
        if exponent <= 0:
            return 0.0
        log_p += math.log1p(-math.pow(2.0, -exponent))
    return math.exp(log_p)


def capacity(n: int, w: int) -> int:
    """How many victims of template size w a single n-pixel image can
    plausibly cover at once: floor(n / w)."""
    if n < 1 or w < 1:
        raise ProblemError("n and w must be positive")
    return n // w


# ---------------------------------------------------------------------------
# Archival JSON


def _password_json(password: bytes | None) -> str | None:
    return password.hex() if password is not None else None


def problem_to_json(problem: AttackProblem) -> dict:
    """JSON-serializable archive of a problem.

    Matrices reachable from a stored password are written by reference
    (password hex plus dimensions); matrices supplied directly are
    inlined entry by entry.
    """
    doc: dict = {
        "kind": problem.kind.value,
        "height": problem.height,
        "width": problem.width,
        "delta": problem.delta,
    }
    if problem.anchor_image is not None:
        doc["anchor_image"] = [[int(v) for v in row] for row in problem.anchor_image.pixels]
    if problem.anchor_feature is not None:
        doc["anchor_feature"] = [float(v) for v in problem.anchor_feature]
    if problem.target_feature is not None:
        doc["target_feature"] = [float(v) for v in problem.target_feature]
    sets = []
    for cs in problem.constraint_sets:
        entry: dict = {
            "template": cs.template.to_bitstring(),
            "orthonormalize": cs.orthonormalize,
            "password_hex": _password_json(cs.password),
        }
        if cs.password is None:
            entry["matrix"] = [[float(v) for v in row] for row in cs.matrix]
        sets.append(entry)
    doc["constraint_sets"] = sets
    return doc


def problem_from_json(doc: dict) -> AttackProblem:
    try:
        kind = ProblemKind(doc["kind"])
    except ValueError:
        raise ProblemError(f"unknown problem kind {doc.get('kind')!r}") from None
    height, width = int(doc["height"]), int(doc["width"])
    n = height * width
    anchor_image = None
    if "anchor_image" in doc:
        anchor_image = GrayImage(width, height, np.array(doc["anchor_image"], dtype=np.int64))
    anchor_feature = np.array(doc["anchor_feature"], dtype=np.float64) if "anchor_feature" in doc else None
    target_feature = np.array(doc["target_feature"], dtype=np.float64) if "target_feature" in doc else None
    sets = []
    for entry in doc.get("constraint_sets", []):
        template = Template.from_bitstring(entry["template"])
        ortho = bool(entry.get("orthonormalize", False))
        pw_hex = entry.get("password_hex")
        if pw_hex is not None:
            password = bytes.fromhex(pw_hex)
            matrix = derive_matrix(password, n, len(template), ortho)
        else:
            password = None
            matrix = np.array(entry["matrix"], dtype=np.float64)
        sets.append(SignConstraintSet.from_template(template, matrix, password, ortho))
    return AttackProblem(
        kind=kind,
        height=height,
        width=width,
        delta=float(doc["delta"]),
        anchor_image=anchor_image,
        anchor_feature=anchor_feature,
        constraint_sets=tuple(sets),
        target_feature=target_feature,
    )


# ---------------------------------------------------------------------------
# Shared feasibility helpers (used by the solver and by tests)


def sign_violations(feature: np.ndarray, problem: AttackProblem) -> np.ndarray:
    """Concatenated hinge violations of every sign constraint at the
    given magnitude vector, margin included for the strict side."""
    chunks = []
    for cs in problem.constraint_sets:
        proj = project(feature, cs.matrix)
        chunks.append(np.maximum(0.0, proj[cs.zero_idx] + problem.delta))
        chunks.append(np.maximum(0.0, -proj[cs.one_idx]))
    return np.concatenate(chunks) if chunks else np.zeros(0)


def template_mismatches(feature: np.ndarray, problem: AttackProblem) -> int:
    """Bits of the binarized projections that disagree with the targets."""
    total = 0
    for cs in problem.constraint_sets:
        total += hamming_distance(binarize(project(feature, cs.matrix)), cs.template)
    return total
