"""Dataset generation, IO round trips, protocols, and the AUC metric."""

import os

import numpy as np
import pytest

from deformad.config import DataSpec, ImageSpec
from deformad.data import (
    LabeledImage,
    SyntheticWarpSpec,
    contaminate,
    generate_corpus,
    load_dataset,
    ood_split,
    save_dataset,
    synthesize_warp,
)
from deformad.fileio import DataError, from_bytes_image, to_bytes_image
from deformad.metrics import compute_auc


def auc_oracle(scored):
    """Brute-force all-pairs counting: wins plus half credit for ties."""
    pos = [s for s, f in scored if f]
    neg = [s for s, f in scored if not f]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def tiny_specs():
    data = DataSpec(train_per_class=4, test_per_class=2, placement_jitter=2,
                    glyph_size=20)
    image = ImageSpec(height=32, width=32)
    return data, image


class TestCorpus:
    def test_deterministic_given_seed(self):
        data, image = tiny_specs()
        a = generate_corpus(data, image, seed=7)
        b = generate_corpus(data, image, seed=7)
        assert len(a) == len(b)
        for x, y in zip(a, b):
            assert x.sample_id == y.sample_id
            assert np.array_equal(x.pixels, y.pixels)

    def test_counts_per_class(self):
        data, image = tiny_specs()
        corpus = generate_corpus(data, image, seed=0)
        per_label = {}
        for img in corpus:
            per_label[img.label] = per_label.get(img.label, 0) + 1
        for label in data.seen_classes:
            assert per_label[label] == 6
        for label in set(range(10)) - set(data.seen_classes):
            assert per_label[label] == 2

    def test_pixel_range(self):
        data, image = tiny_specs()
        corpus = generate_corpus(data, image, seed=0)
        for img in corpus[:10]:
            assert img.pixels.min() >= -1.0 and img.pixels.max() <= 1.0
            assert img.pixels.shape == (1, 32, 32)


class TestDatasetIO:
    def test_round_trip_bit_exact(self, tmp_path):
        data, image = tiny_specs()
        corpus = generate_corpus(data, image, seed=3)[:8]
        root = str(tmp_path / "ds")
        save_dataset(root, corpus)
        loaded = load_dataset(root)
        assert [im.sample_id for im in loaded] == [im.sample_id for im in corpus]
        for orig, back in zip(corpus, loaded):
            # quantized to bytes on save; loading is exact w.r.t. those bytes
            assert np.array_equal(to_bytes_image(orig.pixels),
                                  to_bytes_image(back.pixels))
            save_dataset(root, [back])
            again = load_dataset(root)[0]
            assert np.array_equal(back.pixels, again.pixels)
            break

    def test_normalization_endpoints(self):
        assert from_bytes_image(np.array([0], dtype=np.uint8))[0] == -1.0
        assert from_bytes_image(np.array([255], dtype=np.uint8))[0] == 1.0

    def test_empty_directory_is_empty_collection(self, tmp_path):
        root = tmp_path / "empty"
        root.mkdir()
        assert load_dataset(str(root)) == []

    def test_missing_directory_rejected(self, tmp_path):
        with pytest.raises(DataError, match="does not exist"):
            load_dataset(str(tmp_path / "nope"))

    def test_malformed_png_reports_offset(self, tmp_path):
        data, image = tiny_specs()
        corpus = generate_corpus(data, image, seed=3)[:2]
        root = str(tmp_path / "ds")
        save_dataset(root, corpus)
        victim = os.path.join(root, corpus[0].provenance and
                              str(corpus[0].label), f"{corpus[0].sample_id}.png")
        blob = open(victim, "rb").read()
        open(victim, "wb").write(blob[:20])  # truncate mid-chunk
        with pytest.raises(DataError, match="byte"):
            load_dataset(root)

    def test_masks_round_trip(self, tmp_path):
        img = LabeledImage("s0", np.zeros((1, 8, 8)), label=0, anomaly=True,
                           mask=np.eye(8, dtype=bool), provenance="warped(x)")
        root = str(tmp_path / "ds")
        save_dataset(root, [img])
        back = load_dataset(root)[0]
        assert np.array_equal(back.mask, np.eye(8, dtype=bool))
        assert back.anomaly and back.provenance == "warped(x)"


class TestOodSplit:
    def make(self, labels):
        return [LabeledImage(f"s{i}", np.zeros((1, 4, 4)), label=lab)
                for i, lab in enumerate(labels)]

    def test_seen_all_classes_empty_unseen(self):
        ds = self.make([0, 1, 2, 0, 1, 2])
        train, seen, unseen = ood_split(ds, [0, 1, 2], holdout_fraction=0.5)
        assert unseen == []
        assert len(train) + len(seen) == 6

    def test_standard_protocol_split(self):
        ds = self.make(list(range(10)) * 4)
        train, seen, unseen = ood_split(ds, [1, 3, 5, 7, 9])
        assert {im.label for im in train} == {1, 3, 5, 7, 9}
        assert {im.label for im in unseen} == {0, 2, 4, 6, 8}
        assert all(not im.anomaly for im in train)
        assert all(not im.anomaly for im in seen)
        assert all(im.anomaly for im in unseen)

    def test_partitions_disjoint(self):
        ds = self.make(list(range(10)) * 6)
        train, seen, unseen = ood_split(ds, [1, 3, 5, 7, 9])
        ids = [im.sample_id for im in train + seen + unseen]
        assert len(ids) == len(set(ids)) == 60

    def test_unknown_class_rejected(self):
        ds = self.make([0, 1])
        with pytest.raises(ValueError, match="unknown class"):
            ood_split(ds, [42])

    def test_empty_seen_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            ood_split(self.make([0]), [])


class TestSynthesizeWarp:
    def base_image(self):
        px = np.full((1, 16, 16), -1.0)
        px[0, 7, 5] = 1.0
        return LabeledImage("one_hot", px, label=1)

    def test_zero_spec_identity(self):
        img = self.base_image()
        out = synthesize_warp(img, SyntheticWarpSpec())
        assert np.array_equal(out.pixels, img.pixels)

    def test_translation_moves_argmax_exactly(self):
        img = self.base_image()
        out = synthesize_warp(img, SyntheticWarpSpec(translate=(2.0, 0.0)))
        flat = out.pixels[0].argmax()
        y, x = divmod(flat, 16)
        assert (y, x) == (7, 7)

    def test_deterministic_given_seed(self):
        img = self.base_image()
        spec = SyntheticWarpSpec(translate=(1.0, 0.5), rotate_deg=5.0,
                                 local_amplitude=1.5, seed=11)
        a = synthesize_warp(img, spec)
        b = synthesize_warp(img, spec)
        assert np.array_equal(a.pixels, b.pixels)

    def test_forward_then_backward_translation_recovers_interior(self):
        rng = np.random.default_rng(5)
        smooth = rng.normal(size=(1, 1, 4, 4))
        from deformad import numeric as nm
        from deformad.numeric.tensor import Tensor
        big = nm.bilinear_upsample(Tensor(smooth, dtype=np.float64), (16, 16))
        pixels = big.data[0]
        img = LabeledImage("smooth", pixels, label=0)
        fwd = synthesize_warp(img, SyntheticWarpSpec(translate=(3.0, 0.0)))
        back = synthesize_warp(fwd, SyntheticWarpSpec(translate=(-3.0, 0.0)))
        inner = (slice(None), slice(3, 13), slice(3, 13))
        assert np.allclose(back.pixels[inner], img.pixels[inner], atol=1e-6)

    def test_magnitude_out_of_bounds_rejected(self):
        with pytest.raises(ValueError, match="bounds"):
            synthesize_warp(self.base_image(),
                            SyntheticWarpSpec(translate=(99.0, 0.0)))

    def test_anomaly_mode_attaches_mask(self):
        img = self.base_image()
        out = synthesize_warp(img, SyntheticWarpSpec(translate=(3.0, 0.0)),
                              as_anomaly=True)
        assert out.anomaly and out.mask is not None
        assert out.mask.dtype == bool and out.mask.any()
        assert out.provenance.startswith("warped(")


class TestContaminate:
    def pool(self, tag, n):
        return [LabeledImage(f"{tag}{i}", np.zeros((1, 4, 4)), label=0,
                             anomaly=True) for i in range(n)]

    def test_zero_ratio_unchanged(self):
        train = self.pool("t", 10)
        out = contaminate(train, self.pool("a", 5), 0.0)
        assert [im.sample_id for im in out] == [im.sample_id for im in train]

    def test_exact_ceiling_count(self):
        train = self.pool("t", 1000)
        out = contaminate(train, self.pool("a", 60), 0.05, seed=1)
        assert sum(im.provenance == "contaminant" for im in out) == 50
        assert len(out) == 1000

    def test_deterministic_choice(self):
        train = self.pool("t", 40)
        a = contaminate(train, self.pool("a", 10), 0.1, seed=9)
        b = contaminate(train, self.pool("a", 10), 0.1, seed=9)
        assert ([im.sample_id for im in a] == [im.sample_id for im in b])

    def test_pool_too_small_rejected(self):
        with pytest.raises(ValueError, match="pool"):
            contaminate(self.pool("t", 100), self.pool("a", 2), 0.1)

    def test_ratio_bounds(self):
        with pytest.raises(ValueError, match="ratio"):
            contaminate(self.pool("t", 10), self.pool("a", 10), 0.5)


class TestComputeAuc:
    def test_perfect_separation(self):
        scored = [(0.1, False), (0.2, False), (0.9, True), (0.8, True)]
        assert compute_auc(scored) == 1.0

    def test_all_ties_half(self):
        scored = [(0.5, False), (0.5, True), (0.5, False), (0.5, True)]
        assert compute_auc(scored) == 0.5

    def test_spec_example_by_enumeration(self):
        # scores (1,+),(2,-),(3,+),(4,+): oracle counts 2 of 3 concordant
        scored = [(1.0, True), (2.0, False), (3.0, True), (4.0, True)]
        assert auc_oracle(scored) == pytest.approx(2.0 / 3.0)
        assert compute_auc(scored) == pytest.approx(2.0 / 3.0)

    def test_matches_oracle_exactly_on_random_instances(self):
        rng = np.random.default_rng(123)
        for trial in range(120):
            n = int(rng.integers(2, 50))
            scores = rng.integers(0, 8, size=n).astype(float)  # force ties
            flags = rng.integers(0, 2, size=n).astype(bool)
            if flags.all() or not flags.any():
                continue
            scored = list(zip(scores.tolist(), flags.tolist()))
            assert compute_auc(scored) == auc_oracle(scored)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(7)
        scores = rng.normal(size=30)
        flags = rng.integers(0, 2, size=30).astype(bool)
        flags[0], flags[1] = True, False
        base = compute_auc(list(zip(scores, flags)))
        warped = compute_auc(list(zip(np.exp(scores * 2.0), flags)))
        assert base == pytest.approx(warped, abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="both"):
            compute_auc([(0.3, True), (0.4, True)])
