import numpy as np
import pytest

from dasgan.ck import MARKER_CHANNEL, color_deconvolve, default_stain_matrix, segment_ck
from dasgan.data import Domain, IGNORE, TC_NEG, TC_POS
from dasgan.errors import InvalidArgumentError
from dasgan.evaluate import tc_score
from dasgan.synth import (
    SplitSizes,
    SynthConfig,
    generate_a,
    generate_b,
    make_splits,
    true_translation,
)


class TestGenerateB:
    def test_seeded_determinism(self):
        cfg = SynthConfig(seed=3)
        first = generate_b(cfg, 3)
        second = generate_b(cfg, 3)
        for (p1, m1), (p2, m2) in zip(first, second):
            assert np.array_equal(p1.pixels, p2.pixels)
            assert np.array_equal(m1.values, m2.values)
            assert p1.id == p2.id

    def test_noise_free_recovery(self):
        cfg = SynthConfig(noise_sigma=0.0, seed=9)
        for patch, truth in generate_b(cfg, 10):
            got = segment_ck(patch)
            inter = np.logical_and(got.values, truth.values).sum()
            union = np.logical_or(got.values, truth.values).sum()
            assert inter / union >= 0.98

    def test_no_blobs_blank_scene(self):
        cfg = SynthConfig(n_blobs=(0, 0), seed=1)
        patch, mask = generate_b(cfg, 1)[0]
        assert not mask.values.any()
        assert patch.domain is Domain.B

    def test_pixels_in_range(self):
        for patch, _ in generate_b(SynthConfig(seed=5, noise_sigma=0.05), 3):
            assert patch.pixels.min() >= 0.0 and patch.pixels.max() <= 1.0


class TestGenerateA:
    def test_positive_fraction_zero(self):
        cfg = SynthConfig(positive_fraction=0.0, seed=2)
        for _, mask in generate_a(cfg, 5):
            assert not (mask.labels == TC_POS).any()

    def test_positive_fraction_one_scores_one(self):
        cfg = SynthConfig(positive_fraction=1.0, n_blobs=(1, 3), seed=2)
        for _, mask in generate_a(cfg, 5):
            assert tc_score(mask) == 1.0

    def test_distractors_are_marker_colored_background(self):
        cfg = SynthConfig(distractor_density=12.0, positive_fraction=0.5, seed=4)
        stains = default_stain_matrix()
        found = False
        for patch, mask in generate_a(cfg, 5):
            density = color_deconvolve(patch, stains)[..., MARKER_CHANNEL]
            stained_background = (density > 0.3) & (mask.labels == 0)
            found = found or stained_background.any()
        assert found

    def test_tc_score_is_blob_area_ratio(self):
        cfg = SynthConfig(seed=6)
        for _, mask in generate_a(cfg, 5):
            pos = (mask.labels == TC_POS).sum()
            neg = (mask.labels == TC_NEG).sum()
            if pos + neg:
                assert tc_score(mask) == pytest.approx(pos / (pos + neg))

    def test_invalid_fraction_rejected(self):
        with pytest.raises(InvalidArgumentError):
            SynthConfig(positive_fraction=1.5)


class TestUnpairedDomains:
    def test_layouts_differ_between_domains(self):
        cfg = SynthConfig(seed=8, noise_sigma=0.0)
        b_masks = [m.values for _, m in generate_b(cfg, 4)]
        a_masks = [m.labels > 0 for _, m in generate_a(cfg, 4)]
        for a in a_masks:
            for b in b_masks:
                assert not np.array_equal(a, b)

    def test_true_translation_matches_b_layout(self):
        cfg = SynthConfig(seed=8, noise_sigma=0.0)
        _, b_mask = generate_b(cfg, 1, start_index=3)[0]
        truth = true_translation(cfg, 3, positive=True)
        stains = default_stain_matrix()
        density = color_deconvolve(truth, stains)[..., MARKER_CHANNEL]
        recovered = density > 0.3
        overlap = (recovered & b_mask.values).sum() / max(b_mask.values.sum(), 1)
        assert truth.domain is Domain.A
        assert overlap > 0.95


class TestMakeSplits:
    def test_annotation_fraction_zero(self):
        data = make_splits(SynthConfig(seed=1), SplitSizes(8, 4, 2, 2, annotation_fraction=0.0))
        assert all((m.labels == IGNORE).all() for _, m in data.train_a)

    def test_annotation_fraction_one(self):
        data = make_splits(SynthConfig(seed=1), SplitSizes(8, 4, 2, 2, annotation_fraction=1.0))
        assert not any((m.labels == IGNORE).any() for _, m in data.train_a)

    def test_fraction_keeps_expected_count(self):
        data = make_splits(SynthConfig(seed=1), SplitSizes(10, 4, 2, 2, annotation_fraction=0.3))
        labeled = sum(1 for _, m in data.train_a if (m.labels != IGNORE).any())
        assert labeled == 3

    def test_deterministic(self):
        sizes = SplitSizes(6, 4, 2, 2, annotation_fraction=0.5)
        d1 = make_splits(SynthConfig(seed=2), sizes)
        d2 = make_splits(SynthConfig(seed=2), sizes)
        for s1, s2 in zip((d1.train_a, d1.train_b, d1.test, d1.validation),
                          (d2.train_a, d2.train_b, d2.test, d2.validation)):
            for (p1, m1), (p2, m2) in zip(s1, s2):
                assert np.array_equal(p1.pixels, p2.pixels)
                assert np.array_equal(m1.labels, m2.labels)

    def test_b_masks_embed_epithelium_as_class_one(self):
        data = make_splits(SynthConfig(seed=3), SplitSizes(2, 4, 1, 1))
        for _, mask in data.train_b:
            assert set(np.unique(mask.labels)) <= {0, 1}
            assert mask.domain is Domain.B

    def test_ids_unique_across_splits(self):
        data = make_splits(SynthConfig(seed=4), SplitSizes(4, 4, 2, 2))
        ids = [p.id for bucket in (data.train_a, data.train_b, data.test, data.validation)
               for p, _ in bucket]
        assert len(ids) == len(set(ids))
