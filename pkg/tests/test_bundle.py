"""Bundle format round-trips, validation errors, and the synthetic generator."""

import hashlib
import json
import os

import numpy as np
import pytest

from alien_ue.bundle import (
    EmbeddingBundle,
    SynthConfig,
    TokenSequenceBundle,
    generate_synthetic,
    read_bundle,
    write_bundle,
)
from alien_ue.errors import ValidationError
from conftest import random_bundle


def dir_hash(path):
    digest = hashlib.sha256()
    for root, dirs, files in sorted(os.walk(path)):
        dirs.sort()
        for name in sorted(files):
            digest.update(name.encode())
            with open(os.path.join(root, name), "rb") as fh:
                digest.update(fh.read())
    return digest.hexdigest()


class TestRoundTrip:
    def test_tiny_bundle_identity(self, tmp_path):
        b = EmbeddingBundle(
            features=np.array([[0.5, -1.5], [2.0, 0.25], [0.0, 1.0]], dtype=np.float32),
            gold_labels=np.array([0, 1, 1], dtype=np.uint32),
            head_weight=np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32),
            head_bias=np.array([0.0, -0.5], dtype=np.float32),
            logits=None,
            split_role="train",
        )
        write_bundle(b, tmp_path / "b")
        back = read_bundle(tmp_path / "b")
        assert np.array_equal(back.features, b.features)
        assert np.array_equal(back.gold_labels, b.gold_labels)
        assert np.array_equal(back.head_weight, b.head_weight)
        assert np.array_equal(back.head_bias, b.head_bias)
        assert back.logits is None and back.split_role == "train"

    def test_logits_absent_marked_and_recomputed(self, tmp_path):
        rng = np.random.default_rng(0)
        b = random_bundle(rng, with_logits=False)
        write_bundle(b, tmp_path / "b")
        manifest = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert "logits" not in manifest["files"]
        back = read_bundle(tmp_path / "b")
        expected = np.argmax(back.head_logits(), axis=1)
        assert np.array_equal(back.predictions(), expected)

    def test_logits_present_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        b = random_bundle(rng, with_logits=True)
        write_bundle(b, tmp_path / "b")
        back = read_bundle(tmp_path / "b")
        assert np.array_equal(back.logits, b.logits)

    def test_large_bundle_rewrite_byte_identical(self, tmp_path):
        rng = np.random.default_rng(2)
        b = random_bundle(rng, n=10_000, d=16, c=4)
        write_bundle(b, tmp_path / "one")
        back = read_bundle(tmp_path / "one")
        write_bundle(back, tmp_path / "two")
        assert dir_hash(tmp_path / "one") == dir_hash(tmp_path / "two")

    def test_sequence_bundle_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        lengths = np.array([3, 1, 4], dtype=np.uint32)
        total = int(lengths.sum())
        b = TokenSequenceBundle(
            features=rng.standard_normal((total, 5)).astype(np.float32),
            lengths=lengths,
            gold_labels=np.array([0, 1, 0], dtype=np.uint32),
            head_weight=rng.standard_normal((2, 5)).astype(np.float32),
            head_bias=rng.standard_normal(2).astype(np.float32),
            logits=rng.standard_normal((3, 2)).astype(np.float32),
            split_role="val",
        )
        write_bundle(b, tmp_path / "seq")
        back = read_bundle(tmp_path / "seq")
        assert isinstance(back, TokenSequenceBundle)
        assert np.array_equal(back.lengths, lengths)
        assert np.array_equal(back.features, b.features)
        assert np.array_equal(back.sequence(2), b.features[4:])
        assert np.array_equal(back.terminal_features(), b.features[[2, 3, 7]])


class TestValidation:
    def test_truncated_features_names_field(self, tmp_path):
        rng = np.random.default_rng(4)
        write_bundle(random_bundle(rng), tmp_path / "b")
        path = tmp_path / "b" / "features.bin"
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValidationError, match="features"):
            read_bundle(tmp_path / "b")

    def test_label_out_of_range_names_index(self, tmp_path):
        rng = np.random.default_rng(5)
        b = random_bundle(rng, n=10, c=3)
        write_bundle(b, tmp_path / "b")
        labels = np.fromfile(tmp_path / "b" / "labels.bin", dtype="<u4")
        labels[7] = 3  # == c
        labels.tofile(tmp_path / "b" / "labels.bin")
        with pytest.raises(ValidationError, match="index 7"):
            read_bundle(tmp_path / "b")

    def test_magic_and_version_checked(self, tmp_path):
        rng = np.random.default_rng(6)
        write_bundle(random_bundle(rng), tmp_path / "b")
        manifest_path = tmp_path / "b" / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        manifest["format"] = "XYZ"
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(ValidationError, match="magic"):
            read_bundle(tmp_path / "b")
        manifest["format"] = "UEB"
        manifest["version"] = 2
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(ValidationError, match="version"):
            read_bundle(tmp_path / "b")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ValidationError, match="manifest"):
            read_bundle(tmp_path)

    def test_nonfinite_features_rejected(self):
        rng = np.random.default_rng(7)
        b = random_bundle(rng)
        b.features[3, 1] = np.nan
        with pytest.raises(ValidationError, match="features"):
            b.validate()

    def test_disagreeing_logits_rejected(self):
        rng = np.random.default_rng(8)
        b = random_bundle(rng, with_logits=True)
        logits = b.logits.copy()
        logits[0] = -logits[0]
        swapped = EmbeddingBundle(
            features=b.features, gold_labels=b.gold_labels, head_weight=b.head_weight,
            head_bias=b.head_bias, logits=logits, split_role=b.split_role,
        )
        with pytest.raises(ValidationError, match="disagree"):
            swapped.validate()

    def test_head_input_false_requires_logits(self):
        rng = np.random.default_rng(9)
        b = random_bundle(rng, with_logits=False)
        b.head_input = False
        with pytest.raises(ValidationError, match="head_input"):
            b.validate()

    def test_head_input_false_skips_agreement_check(self):
        # Mid-depth extractions carry true logits with non-head features.
        rng = np.random.default_rng(10)
        b = random_bundle(rng, with_logits=True)
        mid = EmbeddingBundle(
            features=rng.standard_normal(b.features.shape).astype(np.float32),
            gold_labels=b.gold_labels, head_weight=b.head_weight, head_bias=b.head_bias,
            logits=b.logits, split_role=b.split_role, head_input=False,
        )
        mid.validate()

    def test_empty_sequence_rejected(self):
        rng = np.random.default_rng(11)
        with pytest.raises(ValidationError, match="length"):
            TokenSequenceBundle(
                features=rng.standard_normal((2, 3)).astype(np.float32),
                lengths=np.array([2, 0], dtype=np.uint32),
                gold_labels=np.array([0, 1], dtype=np.uint32),
                head_weight=rng.standard_normal((2, 3)).astype(np.float32),
                head_bias=np.zeros(2, dtype=np.float32),
            ).validate()


class TestSynthConfig:
    def test_offset_direction_needs_room(self):
        with pytest.raises(ValidationError, match="orthogonal"):
            SynthConfig(d=4, c=4).validate()

    def test_rho_range(self):
        with pytest.raises(ValidationError):
            SynthConfig(epistemic_fraction=0.6).validate()

    def test_minimum_counts(self):
        with pytest.raises(ValidationError, match="n_val"):
            SynthConfig(n_val=30).validate()


class TestGenerator:
    def test_deterministic_bit_identical(self, tmp_path):
        a = generate_synthetic(SynthConfig(n_train=200, n_val=100, n_test=100, d=6, c=3, seed=9))
        b = generate_synthetic(SynthConfig(n_train=200, n_val=100, n_test=100, d=6, c=3, seed=9))
        for role in ("train", "val", "test"):
            x, y = a.bundles()[role], b.bundles()[role]
            assert np.array_equal(x.features, y.features)
            assert np.array_equal(x.logits, y.logits)
            assert np.array_equal(x.gold_labels, y.gold_labels)
        write_bundle(a.train, tmp_path / "a")
        write_bundle(b.train, tmp_path / "b")
        assert dir_hash(tmp_path / "a") == dir_hash(tmp_path / "b")

    def test_clean_config_high_accuracy(self):
        res = generate_synthetic(
            SynthConfig(n_train=1000, n_val=400, n_test=400, epistemic_fraction=0.0, seed=1)
        )
        assert res.info["base_accuracy"]["test"] > 0.9
        assert all(len(v) == 0 for v in res.info["pocket_indices"].values())

    def test_pocket_properties(self, synth):
        for role, bundle in synth.bundles().items():
            pocket = np.array(synth.info["pocket_indices"][role])
            errors = bundle.error_labels()
            entropy = bundle.base_entropy()
            assert errors[pocket].mean() >= 0.95
            assert entropy[pocket].mean() < 0.3
            clean_wrong = np.setdiff1d(np.flatnonzero(errors == 1), pocket)
            assert entropy[pocket].mean() < entropy[clean_wrong].mean()

    def test_bundles_pass_validation(self, synth, tmp_path):
        write_bundle(synth.val, tmp_path / "v")
        back = read_bundle(tmp_path / "v")
        assert back.n == synth.val.n
