import numpy as np
import pytest

from tpat.attack import (
    AttackSpace,
    KernelAndInitParams,
    KernelOnlyParams,
    SimpleCAParams,
    decode_params,
    encode_params,
    fooling_rate,
    initial_vector,
    make_synthetic_images,
    optimize_attack,
    random_vector,
    render_perturbation,
    sweep_filter_size,
    transfer_eval,
)
from tpat.ca import PatternState, RectKernel, Independent, expand_init, run_ca
from tpat.classifiers import ToyCnnClassifier, cached
from tpat.core import apply_perturbation, seeded_rng


class PixelThresholdStub:
    """Deterministic handle labelling by the top-left pixel's 64-bucket."""

    name = "stub"
    input_shape = (3, 8, 8)
    n_classes = 4

    def classify_batch(self, images):
        batch = np.asarray(images, dtype=float)
        if batch.ndim == 3:
            batch = batch[np.newaxis]
        return [int(min(img[0, 0, 0], 255) // 64) for img in batch]


def small_space(**kw):
    base = dict(variant="simple", filter_size=5, tiles=2, tile_size=8, steps=8)
    base.update(kw)
    return AttackSpace(**base)


class TestSpace:
    def test_dimensions(self):
        assert AttackSpace(variant="simple").dim == 149
        assert AttackSpace(variant="kernel-init").dim == 316
        assert AttackSpace(variant="kernel-only", filter_size=3,
                           mix="pointwise").dim == 36
        assert AttackSpace(variant="kernel-only", filter_size=5,
                           mix="filter3d").dim == 75
        assert AttackSpace(variant="kernel-init", filter_size=3,
                           mix="summation", tiles=2).dim == 9 + 12

    def test_pattern_shape(self):
        assert AttackSpace(tiles=7, tile_size=32).pattern_shape == (3, 224, 224)
        assert small_space().pattern_shape == (3, 16, 16)

    def test_validation(self):
        with pytest.raises(ValueError, match="variant"):
            AttackSpace(variant="nope")
        with pytest.raises(ValueError, match="mix"):
            AttackSpace(variant="kernel-init", mix="nope")
        with pytest.raises(ValueError, match="independent"):
            AttackSpace(variant="simple", mix="summation")
        with pytest.raises(ValueError, match="odd"):
            AttackSpace(filter_size=4)
        with pytest.raises(ValueError, match="3-channel"):
            AttackSpace(channels=1)
        with pytest.raises(ValueError, match="budget"):
            AttackSpace(budget=0.0)


class TestCodec:
    def test_simple_decode_discretizes(self):
        space = small_space()
        vec = np.concatenate([[2.4, 2.5], np.linspace(-1, 1, 12)])
        theta = decode_params(vec, space)
        assert isinstance(theta, SimpleCAParams)
        assert (theta.l1, theta.l2) == (2, 3)  # round half up
        assert theta.init.tile_values.shape == (3, 2, 2)

    def test_zero_logit_maps_to_plus_tile(self):
        space = small_space()
        vec = np.zeros(space.dim)
        theta = decode_params(vec, space)
        assert np.all(theta.init.tile_values == 1.0)

    def test_sides_clamped_and_surround_preserved(self):
        space = small_space()
        theta = decode_params(np.concatenate([[99.0, -7.0], np.zeros(12)]), space)
        assert (theta.l1, theta.l2) == (5, 1)
        full = decode_params(np.concatenate([[5.4, 5.4], np.zeros(12)]), space)
        assert (full.l1, full.l2) == (5, 4)  # l1*l2 must stay below size^2
        assert full.l1 * full.l2 < 25

    @pytest.mark.parametrize("variant,mix", [
        ("simple", "independent"),
        ("kernel-init", "independent"),
        ("kernel-init", "summation"),
        ("kernel-init", "filter3d"),
        ("kernel-init", "pointwise"),
        ("kernel-only", "independent"),
        ("kernel-only", "pointwise"),
    ])
    def test_decode_encode_round_trip(self, variant, mix):
        space = small_space(variant=variant, mix=mix, filter_size=3)
        vec = random_vector(space, seeded_rng(1, f"codec-{variant}-{mix}"))
        theta = decode_params(vec, space)
        back = decode_params(encode_params(theta, space), space)
        assert type(back) is type(theta)
        if hasattr(theta, "elements"):
            assert np.array_equal(back.elements, theta.elements)
            if theta.mix_matrix is not None:
                assert np.array_equal(back.mix_matrix, theta.mix_matrix)
        if hasattr(theta, "init"):
            assert np.array_equal(back.init.tile_values, theta.init.tile_values)
        if isinstance(theta, SimpleCAParams):
            assert (back.l1, back.l2) == (theta.l1, theta.l2)

    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError, match="vector"):
            decode_params(np.zeros(10), small_space())

    def test_encode_checks_space_variant(self):
        theta = decode_params(np.zeros(small_space().dim), small_space())
        with pytest.raises(ValueError, match="cannot encode"):
            encode_params(theta, small_space(variant="kernel-init"))


class TestRender:
    def test_entries_are_exactly_budget(self):
        space = small_space(budget=10.0)
        theta = decode_params(random_vector(space, seeded_rng(2, "render")), space)
        eps = render_perturbation(theta, space)
        assert eps.shape == space.pattern_shape
        assert set(np.unique(np.abs(eps))) == {10.0}

    def test_matches_manual_pipeline(self):
        space = small_space(budget=4.0, steps=6)
        theta = decode_params(random_vector(space, seeded_rng(3, "render2")), space)
        eps = render_perturbation(theta, space)
        state = run_ca(expand_init(theta.init),
                       RectKernel(space.filter_size, theta.l1, theta.l2),
                       Independent(), steps=6, mode=space.boundary)
        assert np.array_equal(eps, state.cells * 4.0)

    def test_kernel_only_uses_seeded_init(self):
        space = small_space(variant="kernel-only", filter_size=3, init_seed=5)
        theta = decode_params(random_vector(space, seeded_rng(4, "render3")), space)
        eps = render_perturbation(theta, space)
        rng = seeded_rng(5, "kernel-only-init")
        cells = rng.integers(0, 2, size=space.pattern_shape) * 2.0 - 1.0
        from tpat.ca import FreeKernel
        state = run_ca(PatternState(cells), FreeKernel(3, theta.elements),
                       Independent(), steps=space.steps, mode=space.boundary)
        assert np.array_equal(eps, state.cells * space.budget)

    def test_deterministic(self):
        space = small_space(variant="kernel-init", mix="pointwise", filter_size=3)
        theta = decode_params(random_vector(space, seeded_rng(6, "render4")), space)
        assert np.array_equal(render_perturbation(theta, space),
                              render_perturbation(theta, space))


class TestFoolingRate:
    def test_zero_perturbation_never_fools(self):
        clf = ToyCnnClassifier(seed=0, input_shape=(3, 16, 16))
        images = make_synthetic_images(10, shape=(3, 16, 16), seed=16)
        report = fooling_rate(clf, images, np.zeros((3, 16, 16)), budget=10.0)
        assert report.fooling_rate == 0.0
        assert report.flips == [False] * 10
        assert report.queries_used == 20

    def test_worked_three_of_four(self):
        clf = PixelThresholdStub()
        images = np.full((4, 3, 8, 8), 30.0)
        for i, v in enumerate([60.0, 120.0, 190.0, 10.0]):
            images[i, 0, 0, 0] = v
        eps = np.zeros((3, 8, 8))
        eps[0, 0, 0] = 10.0
        report = fooling_rate(clf, images, eps, budget=10.0)
        assert report.fooling_rate == 0.75
        assert report.flips == [True, True, True, False]
        assert report.n_images == 4

    def test_rate_times_n_is_integral(self):
        clf = ToyCnnClassifier(seed=1, input_shape=(3, 16, 16))
        images = make_synthetic_images(7, shape=(3, 16, 16), seed=17)
        eps = 10.0 * np.sign(seeded_rng(7, "fr-int").standard_normal((3, 16, 16)))
        report = fooling_rate(clf, images, eps)
        scaled = report.fooling_rate * report.n_images
        assert scaled == int(round(scaled))

    def test_matches_uncached_brute_force(self):
        clf = ToyCnnClassifier(seed=2, input_shape=(3, 16, 16))
        rng = seeded_rng(8, "fr-brute")
        for trial in range(10):
            images = make_synthetic_images(6, shape=(3, 16, 16), seed=100 + trial)
            eps = 10.0 * np.sign(rng.standard_normal((3, 16, 16)))
            clean = clf.classify_batch(images)
            adv = clf.classify_batch(apply_perturbation(images, eps, 10.0))
            expected = sum(int(c != a) for c, a in zip(clean, adv)) / 6.0
            assert fooling_rate(clf, images, eps, budget=10.0).fooling_rate \
                == expected

    def test_permutation_invariance(self):
        clf = ToyCnnClassifier(seed=3, input_shape=(3, 16, 16))
        images = make_synthetic_images(8, shape=(3, 16, 16), seed=18)
        eps = 10.0 * np.sign(seeded_rng(9, "fr-perm").standard_normal((3, 16, 16)))
        base = fooling_rate(clf, images, eps)
        perm = seeded_rng(10, "fr-perm2").permutation(8)
        shuffled = fooling_rate(clf, images[perm], eps)
        assert shuffled.fooling_rate == base.fooling_rate
        assert shuffled.flips == [base.flips[i] for i in perm]

    def test_supplied_clean_labels_halve_queries(self):
        clf = ToyCnnClassifier(seed=4, input_shape=(3, 16, 16))
        images = make_synthetic_images(5, shape=(3, 16, 16), seed=19)
        eps = 10.0 * np.sign(seeded_rng(11, "fr-clean").standard_normal((3, 16, 16)))
        full = fooling_rate(clf, images, eps)
        primed = fooling_rate(clf, images, eps,
                              clean_labels=clf.classify_batch(images))
        assert primed.fooling_rate == full.fooling_rate
        assert primed.queries_used == 5 and full.queries_used == 10

    def test_validation_and_provenance(self):
        clf = ToyCnnClassifier(seed=0, input_shape=(3, 16, 16))
        images = make_synthetic_images(3, shape=(3, 16, 16), seed=20)
        with pytest.raises(ValueError, match="shape"):
            fooling_rate(clf, images, np.zeros((3, 8, 8)))
        with pytest.raises(ValueError, match="non-empty"):
            fooling_rate(clf, np.zeros((0, 3, 16, 16)), np.zeros((3, 16, 16)))
        with pytest.raises(ValueError, match="clean_labels"):
            fooling_rate(clf, images, np.zeros((3, 16, 16)), clean_labels=[1])
        report = fooling_rate(clf, images, np.zeros((3, 16, 16)),
                              provenance={"tag": "x"})
        assert report.to_dict()["provenance"] == {"tag": "x"}


class TestOptimizeAttack:
    def test_budget_exhausted_and_reported(self):
        clf = ToyCnnClassifier(seed=0, input_shape=(3, 16, 16))
        images = make_synthetic_images(16, shape=(3, 16, 16), seed=21)
        theta, report, trace = optimize_attack(
            clf, images, small_space(), query_budget=20, seed=0,
            lambda_override=6)
        assert report.queries_used == 20
        assert trace[-1]["evaluations_used"] == 20
        assert 0.0 <= report.fooling_rate <= 1.0
        assert isinstance(theta, SimpleCAParams)
        assert report.provenance["variant"] == "simple"
        assert report.provenance["query_budget"] == 20

    def test_deterministic_across_threads(self):
        clf_a = ToyCnnClassifier(seed=0, input_shape=(3, 16, 16))
        clf_b = ToyCnnClassifier(seed=0, input_shape=(3, 16, 16))
        images = make_synthetic_images(12, shape=(3, 16, 16), seed=22)
        space = small_space(variant="kernel-init", filter_size=3)
        ta, ra, tra = optimize_attack(clf_a, images, space, 18, seed=1,
                                      lambda_override=6, threads=1)
        tb, rb, trb = optimize_attack(clf_b, images, space, 18, seed=1,
                                      lambda_override=6, threads=4)
        assert np.array_equal(encode_params(ta, space), encode_params(tb, space))
        assert ra.fooling_rate == rb.fooling_rate
        assert [r["best_f"] for r in tra] == [r["best_f"] for r in trb]

    def test_trace_best_is_achieved_rate(self):
        clf = ToyCnnClassifier(seed=5, input_shape=(3, 16, 16))
        images = make_synthetic_images(10, shape=(3, 16, 16), seed=23)
        theta, report, trace = optimize_attack(
            clf, images, small_space(), query_budget=12, seed=2,
            lambda_override=6)
        assert report.fooling_rate == -trace[-1]["best_f"]

    def test_image_shape_checked(self):
        clf = ToyCnnClassifier(seed=0, input_shape=(3, 16, 16))
        wrong = make_synthetic_images(4, shape=(3, 8, 8), seed=0)
        with pytest.raises(ValueError, match="pattern"):
            optimize_attack(clf, wrong, small_space(), 12)


class TestSweepAndTransfer:
    def test_sweep_row_contract(self):
        clf = ToyCnnClassifier(seed=0, input_shape=(3, 16, 16))
        images = make_synthetic_images(8, shape=(3, 16, 16), seed=24)
        rows = sweep_filter_size(clf, images, sizes=[3], query_budget=15,
                                 seed=0, tiles=2, tile_size=8, n_random_inits=3)
        assert len(rows) == 1
        row = rows[0]
        assert row["filter_size"] == 3
        assert row["fr_kernel_only_min"] <= row["fr_kernel_only_mean"] \
            <= row["fr_kernel_only_max"]
        assert 0.0 <= row["fr_kernel_init"] <= 1.0

    def test_transfer_matrix(self):
        images = make_synthetic_images(6, shape=(3, 16, 16), seed=25)
        eps = 10.0 * np.sign(seeded_rng(12, "transfer").standard_normal((3, 16, 16)))
        clf_a = ToyCnnClassifier(seed=0, input_shape=(3, 16, 16))
        clf_b = ToyCnnClassifier(seed=9, input_shape=(3, 16, 16))
        matrix = transfer_eval([eps, -eps], [clf_a, clf_b], images)
        assert matrix.shape == (2, 2)
        solo = fooling_rate(cached(ToyCnnClassifier(seed=0, input_shape=(3, 16, 16))),
                            images, eps)
        assert matrix[0, 0] == solo.fooling_rate
        # same handle listed twice gives identical columns
        twice = transfer_eval([eps], [clf_a, ToyCnnClassifier(
            seed=0, input_shape=(3, 16, 16))], images)
        assert twice[0, 0] == twice[0, 1]

    def test_transfer_validation(self):
        with pytest.raises(ValueError, match="classifier"):
            transfer_eval(np.zeros((1, 3, 8, 8)), [], np.zeros((1, 3, 8, 8)))


class TestSyntheticImages:
    def test_contract(self):
        images = make_synthetic_images(9, shape=(3, 16, 16), seed=26)
        assert images.shape == (9, 3, 16, 16)
        assert images.min() >= 0.0 and images.max() <= 255.0
        # quantized to 32-bit wire precision for cache stability
        assert np.array_equal(images, images.astype(np.float32).astype(np.float64))
        again = make_synthetic_images(9, shape=(3, 16, 16), seed=26)
        assert np.array_equal(images, again)
        other = make_synthetic_images(9, shape=(3, 16, 16), seed=27)
        assert not np.array_equal(images, other)

    def test_initial_vector_is_seed_deterministic(self):
        space = small_space()
        assert np.array_equal(initial_vector(space, 3), initial_vector(space, 3))
        assert not np.array_equal(initial_vector(space, 3),
                                  initial_vector(space, 4))
        assert initial_vector(space, 3).shape == (space.dim,)
