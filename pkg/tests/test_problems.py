"""Attack-problem construction, Hamming centers, capacity analysis,
and archival JSON."""

from fractions import Fraction

import numpy as np
import pytest

from biopreimage import (
    AttackProblem,
    GrayImage,
    ProblemError,
    ProblemKind,
    SignConstraintSet,
    Template,
    build_feature_phase,
    build_image_phase,
    build_merged,
    build_multi_auth,
    build_multi_collision,
    capacity,
    default_margin,
    derive_matrix,
    enroll,
    hamming_center,
    hamming_distance,
    independence_probability,
    problem_from_json,
    problem_to_json,
    sign_violations,
    sobel,
    template_mismatches,
)


def minimax_oracle(bit_rows):
    """Exhaustive minimax center over all 2^m candidates.

    Ties prefer the candidate agreeing with the first row at the
    lowest-index disagreeing bit (bit 0 is most significant in the
    comparison).  Returns (center_bits, radius).
    """
    rows = np.asarray(bit_rows, dtype=np.uint8)
    t, m = rows.shape
    best_center, best_key = None, None
    for code in range(1 << m):
        cand = np.array([(code >> (m - 1 - i)) & 1 for i in range(m)], dtype=np.uint8)
        radius = int((rows != cand).sum(axis=1).max())
        mism = int("".join("1" if b else "0" for b in cand ^ rows[0]), 2)
        key = (radius, mism)
        if best_key is None or key < best_key:
            best_key, best_center = key, cand
    return best_center, best_key[0]


def center_oracle(bit_rows, epsilon):
    """Greedy farthest-drop loop around minimax_oracle."""
    rows = np.asarray(bit_rows, dtype=np.uint8)
    alive = list(range(len(rows)))
    while True:
        center, radius = minimax_oracle(rows[alive])
        if radius <= epsilon or len(alive) == 1:
            return center, radius, tuple(alive)
        dist = (rows[alive] != center).sum(axis=1)
        alive.pop(int(np.argmax(dist)))


class TestSignConstraintSet:
    def test_from_template_partition(self):
        t = Template.from_bitstring("0110")
        cs = SignConstraintSet.from_template(t, np.zeros((5, 4)))
        assert cs.zero_idx.tolist() == [0, 3]
        assert cs.one_idx.tolist() == [1, 2]
        assert cs.n == 5 and cs.m == 4

    def test_rejects_overlapping_partition(self):
        t = Template.from_bitstring("01")
        with pytest.raises(ProblemError):
            SignConstraintSet(np.zeros((2, 2)), [0, 0], [1], t)

    def test_rejects_partition_template_disagreement(self):
        t = Template.from_bitstring("01")
        with pytest.raises(ProblemError):
            SignConstraintSet(np.zeros((2, 2)), [1], [0], t)

    def test_rejects_matrix_width_mismatch(self):
        t = Template.from_bitstring("01")
        with pytest.raises(ProblemError):
            SignConstraintSet.from_template(t, np.zeros((2, 3)))


class TestProblemValidation:
    def test_rejects_nonpositive_delta(self):
        t = Template.from_bitstring("1")
        cs = SignConstraintSet.from_template(t, np.ones((1, 1)))
        with pytest.raises(ProblemError):
            AttackProblem(ProblemKind.FEATURE_PHASE, 1, 1, 0.0, constraint_sets=(cs,))

    def test_rejects_row_count_mismatch(self):
        t = Template.from_bitstring("1")
        cs = SignConstraintSet.from_template(t, np.ones((3, 1)))
        with pytest.raises(ProblemError):
            AttackProblem(ProblemKind.FEATURE_PHASE, 2, 2, 1.0, constraint_sets=(cs,))

    def test_multi_collision_needs_two_sets(self):
        t = Template.from_bitstring("1")
        cs = SignConstraintSet.from_template(t, np.ones((1, 1)))
        with pytest.raises(ProblemError):
            AttackProblem(ProblemKind.MULTI_COLLISION, 1, 1, 1.0, constraint_sets=(cs,))

    def test_image_phase_needs_target(self):
        with pytest.raises(ProblemError):
            AttackProblem(ProblemKind.IMAGE_PHASE, 2, 2, 1.0)

    def test_default_margin_hand_value(self):
        mat = np.array([[3.0, 0.0], [4.0, 1.0]])  # column norms 5 and 1
        assert default_margin(mat) == pytest.approx(5e-6)


class TestBuilders:
    def setup_method(self):
        self.img = GrayImage.from_flat(2, 2, [10, 200, 35, 90])
        self.t = enroll(self.img, "victim-pw", 8)

    def test_merged_password_derives_matrix(self):
        prob = build_merged(self.img, self.t, password=b"victim-pw")
        want = derive_matrix(b"victim-pw", 4, 8)
        assert np.array_equal(prob.constraint_sets[0].matrix, want)
        assert prob.kind is ProblemKind.MERGED
        assert prob.anchor_image == self.img

    def test_merged_explicit_matrix(self):
        mat = derive_matrix("other", 4, 8)
        prob = build_merged(self.img, self.t, matrix=mat)
        assert np.array_equal(prob.constraint_sets[0].matrix, mat)

    def test_merged_needs_matrix_or_password(self):
        with pytest.raises(ProblemError):
            build_merged(self.img, self.t)

    def test_anchor_of_own_template_has_no_mismatch(self):
        prob = build_merged(self.img, self.t, password=b"victim-pw")
        assert template_mismatches(sobel(self.img), prob) == 0

    def test_feature_phase_carries_anchor_feature(self):
        feat = sobel(self.img)
        mat = derive_matrix("victim-pw", 4, 8)
        prob = build_feature_phase(feat, self.t, mat)
        assert prob.kind is ProblemKind.FEATURE_PHASE
        assert np.array_equal(prob.anchor_feature, feat)
        assert prob.anchor_image is None

    def test_image_phase_carries_target(self):
        target = sobel(self.img)
        prob = build_image_phase(self.img, target)
        assert prob.kind is ProblemKind.IMAGE_PHASE
        assert np.array_equal(prob.target_feature, target)
        assert not prob.constraint_sets

    def test_multi_auth_kind(self):
        prob = build_multi_auth(self.img, self.t, password=b"attacker-pw")
        assert prob.kind is ProblemKind.MULTI_AUTH
        assert prob.constraint_sets[0].m == 8

    def test_multi_collision_stacks_victims(self):
        t2 = enroll(self.img, "second-pw", 8)
        with pytest.warns(UserWarning):
            prob = build_multi_collision(self.img, [(self.t, b"victim-pw"), (t2, b"second-pw")])
        assert prob.kind is ProblemKind.MULTI_COLLISION
        assert len(prob.constraint_sets) == 2
        assert np.array_equal(prob.constraint_sets[1].matrix, derive_matrix("second-pw", 4, 8))

    def test_multi_collision_capacity_warning(self):
        t2 = enroll(self.img, "second-pw", 8)
        with pytest.warns(UserWarning):
            # 8 + 8 constraint bits over only 4 pixels
            build_multi_collision(self.img, [(self.t, b"victim-pw"), (t2, b"second-pw")])

    def test_multi_collision_within_capacity_quiet(self):
        img = GrayImage.from_flat(4, 4, range(16))
        ta = enroll(img, "a", 8)
        tb = enroll(img, "b", 8)
        with __import__("warnings").catch_warnings():
            __import__("warnings").simplefilter("error")
            build_multi_collision(img, [(ta, b"a"), (tb, b"b")])


class TestHammingCenter:
    def test_single_template(self):
        t = Template.from_bitstring("1010")
        res = hamming_center([t], 0)
        assert res.center == t and res.radius == 0 and res.members == (0,)

    def test_two_template_worked_example(self):
        t1 = Template.from_bitstring("0000")
        t2 = Template.from_bitstring("0011")
        res = hamming_center([t1, t2], 1)
        assert res.radius == 1
        assert res.members == (0, 1)
        # tie between 0001 and 0010 resolves toward agreeing with t1
        # on the lower-index disagreeing bit
        assert res.center.to_bitstring() == "0001"

    def test_three_template_drop_example(self):
        ts = [Template.from_bitstring(s) for s in ("0000", "0011", "1100")]
        res = hamming_center(ts, 1)
        assert len(res.members) == 2
        assert res.radius <= 1
        for i in res.members:
            assert hamming_distance(res.center, ts[i]) <= 1

    def test_two_templates_split_rule(self):
        rng = np.random.default_rng(31)
        for _ in range(40):
            m = int(rng.integers(1, 20))
            a = Template(rng.integers(0, 2, size=m))
            b = Template(rng.integers(0, 2, size=m))
            d = hamming_distance(a, b)
            res = hamming_center([a, b], m)
            assert res.members == (0, 1)
            assert res.radius == -(-d // 2)
            assert hamming_distance(res.center, a) + hamming_distance(res.center, b) == d

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(37)
        for _ in range(60):
            m = int(rng.integers(1, 9))
            k = int(rng.integers(1, 5))
            eps = int(rng.integers(0, m + 1))
            ts = [Template(rng.integers(0, 2, size=m)) for _ in range(k)]
            want_center, want_radius, want_members = center_oracle(
                np.stack([t.bits for t in ts]), eps
            )
            res = hamming_center(ts, eps)
            assert res.radius == want_radius
            assert res.members == want_members
            assert np.array_equal(res.center.bits, want_center)

    def test_deterministic(self):
        rng = np.random.default_rng(41)
        ts = [Template(rng.integers(0, 2, size=10)) for _ in range(4)]
        r1 = hamming_center(ts, 2)
        r2 = hamming_center(ts, 2)
        assert r1.center == r2.center and r1.members == r2.members

    def test_rejects_bad_input(self):
        with pytest.raises(ProblemError):
            hamming_center([], 1)
        with pytest.raises(ProblemError):
            hamming_center([Template.from_bitstring("10")], -1)
        with pytest.raises(ProblemError):
            hamming_center(
                [Template.from_bitstring("10"), Template.from_bitstring("101")], 1
            )


class TestCapacityAnalysis:
    def test_probability_hand_values(self):
        assert independence_probability(10, 1, 8) == 1.0
        assert independence_probability(2, 2, 1) == 0.5
        assert independence_probability(4, 2, 1) == 0.875

    def test_probability_matches_exact_fraction(self):
        for n, k, eta in [(6, 4, 2), (5, 3, 1), (8, 2, 3), (4, 4, 1)]:
            exact = Fraction(1)
            for i in range(2, k + 1):
                e = eta * (n - i + 1)
                exact *= Fraction(2**e - 1, 2**e)
            got = independence_probability(n, k, eta)
            assert got == pytest.approx(float(exact), rel=1e-12)

    def test_probability_more_vectors_than_dims(self):
        # the i = n+1 factor is (2^0 - 1)/2^0 = 0
        assert independence_probability(3, 4, 2) == 0.0

    def test_probability_rejects_bad_args(self):
        with pytest.raises(ProblemError):
            independence_probability(0, 1, 1)
        with pytest.raises(ProblemError):
            independence_probability(1, 1, 0)

    def test_capacity_values(self):
        assert capacity(16, 8) == 2
        assert capacity(256, 16) == 16
        assert capacity(7, 8) == 0
        with pytest.raises(ProblemError):
            capacity(0, 4)


class TestJson:
    def setup_method(self):
        self.img = GrayImage.from_flat(2, 2, [10, 200, 35, 90])
        self.t = enroll(self.img, "victim-pw", 8)

    def _round_trip(self, prob):
        doc = problem_to_json(prob)
        back = problem_from_json(doc)
        assert back.kind is prob.kind
        assert back.height == prob.height and back.width == prob.width
        assert back.delta == prob.delta
        assert back.anchor_image == prob.anchor_image
        assert len(back.constraint_sets) == len(prob.constraint_sets)
        for a, b in zip(back.constraint_sets, prob.constraint_sets):
            assert np.array_equal(a.matrix, b.matrix)
            assert a.template == b.template
            assert a.password == b.password
        if prob.target_feature is None:
            assert back.target_feature is None
        else:
            assert np.array_equal(back.target_feature, prob.target_feature)
        if prob.anchor_feature is None:
            assert back.anchor_feature is None
        else:
            assert np.array_equal(back.anchor_feature, prob.anchor_feature)
        return doc

    def test_merged(self):
        self._round_trip(build_merged(self.img, self.t, password=b"victim-pw"))

    def test_feature_phase(self):
        mat = derive_matrix("victim-pw", 4, 8)
        self._round_trip(build_feature_phase(sobel(self.img), self.t, mat))

    def test_image_phase(self):
        self._round_trip(build_image_phase(self.img, sobel(self.img)))

    def test_multi_collision(self):
        t2 = enroll(self.img, "second", 8)
        with pytest.warns(UserWarning):
            prob = build_multi_collision(self.img, [(self.t, b"victim-pw"), (t2, b"second")])
        self._round_trip(prob)

    def test_doc_is_json_serializable(self):
        import json

        doc = problem_to_json(build_merged(self.img, self.t, password=b"victim-pw"))
        assert json.loads(json.dumps(doc)) == doc

    def test_rejects_unknown_kind(self):
        doc = problem_to_json(build_merged(self.img, self.t, password=b"victim-pw"))
        doc["kind"] = "bogus"
        with pytest.raises(ProblemError):
            problem_from_json(doc)


class TestResidualHelpers:
    def test_sign_violations_shape_and_zero_case(self):
        img = GrayImage.from_flat(2, 2, [10, 200, 35, 90])
        t = enroll(img, "pw", 6)
        prob = build_merged(img, t, password=b"pw")
        v = sign_violations(sobel(img), prob)
        assert v.shape == (6,)
        # bit-1 columns are exactly satisfied; bit-0 columns may sit
        # within delta of the boundary, never beyond it
        assert (v <= prob.delta + 1e-12).all()

    def test_template_mismatches_counts_flips(self):
        img = GrayImage.from_flat(2, 2, [10, 200, 35, 90])
        t = enroll(img, "pw", 6)
        flipped = Template(1 - t.bits)
        prob = build_merged(img, flipped, password=b"pw")
        assert template_mismatches(sobel(img), prob) == 6
