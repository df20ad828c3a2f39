import struct

import numpy as np
import pytest

from ternvit import model_io
from ternvit.bitlinear import StateError
from ternvit.model_io import (
    CheckpointCorruptError,
    CheckpointFormatError,
    UnsupportedVersionError,
    load,
    read_records,
    save,
)
from ternvit.trit_pack import packed_size_report
from ternvit.vit import VitConfig, VitModel


def small(**kw):
    base = dict(image_size=8, patch_size=4, channels=3, dim=12, depth=2, heads=3, mlp_dim=20, num_classes=4)
    base.update(kw)
    return VitConfig(**base)


@pytest.fixture
def images(rng):
    return rng.standard_normal((3, 3, 8, 8)).astype(np.float32)


class TestRoundtrip:
    @pytest.mark.parametrize("quantized", [True, False])
    def test_latent_bit_exact(self, tmp_path, images, quantized):
        model = VitModel(small(quantized=quantized), seed=3)
        model.norm_mean, model.norm_std = [0.1, 0.2, 0.3], [1.0, 2.0, 0.5]
        save(model, tmp_path / "m.tvit", train_summary={"epochs": 2, "lr": 0.001})
        ck = load(tmp_path / "m.tvit")
        assert ck.kind == "latent" and ck.config == model.cfg
        for (n1, p1), (n2, p2) in zip(model.named_parameters(), ck.model.named_parameters()):
            assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
        assert model(images).data.tobytes() == ck.model(images).data.tobytes()
        assert ck.model.norm_mean == [0.1, 0.2, 0.3] and ck.model.norm_std == [1.0, 2.0, 0.5]
        assert ck.train_summary == {"epochs": "2", "lr": "0.001"}

    def test_resave_is_byte_identical(self, tmp_path):
        save(VitModel(small(), seed=1), tmp_path / "a")
        save(load(tmp_path / "a").model, tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_ternary_matches_in_memory_frozen(self, tmp_path, images):
        model = VitModel(small(), seed=2)
        model.freeze()
        save(model, tmp_path / "t", kind="ternary")
        ck = load(tmp_path / "t")
        assert ck.kind == "ternary" and ck.model.is_frozen
        assert all(layer.latent_weight is None for layer in ck.model.bitlinear_layers())
        assert np.max(np.abs(ck.model(images).data - model(images).data)) < 1e-6
        for a, b in zip(model.bitlinear_layers(), ck.model.bitlinear_layers()):
            assert a.frozen.packed == b.frozen.packed
            assert b.frozen.beta == float(np.float32(a.frozen.beta))

    def test_ternary_resave_identical(self, tmp_path):
        model = VitModel(small(), seed=2)
        model.freeze()
        save(model, tmp_path / "t1", kind="ternary")
        save(load(tmp_path / "t1").model, tmp_path / "t2", kind="ternary")
        assert (tmp_path / "t1").read_bytes() == (tmp_path / "t2").read_bytes()

    def test_atomic_overwrite_leaves_no_temp(self, tmp_path):
        model = VitModel(small(), seed=0)
        save(model, tmp_path / "m")
        save(model, tmp_path / "m")
        assert [p.name for p in tmp_path.iterdir()] == ["m"]


class TestStateChecks:
    def test_ternary_needs_frozen(self, tmp_path):
        with pytest.raises(StateError):
            save(VitModel(small()), tmp_path / "x", kind="ternary")
        assert not (tmp_path / "x").exists()

    def test_ternary_needs_quantized(self, tmp_path):
        with pytest.raises(StateError):
            save(VitModel(small(quantized=False)), tmp_path / "x", kind="ternary")

    def test_latent_needs_latent_weights(self, tmp_path):
        model = VitModel(small())
        model.freeze(drop_latent=True)
        with pytest.raises(StateError):
            save(model, tmp_path / "x", kind="latent")

    def test_unknown_kind(self, tmp_path):
        with pytest.raises(ValueError):
            save(VitModel(small()), tmp_path / "x", kind="int4")


class TestLayout:
    def test_header_fields(self, tmp_path):
        save(VitModel(small(), seed=0), tmp_path / "m")
        raw = (tmp_path / "m").read_bytes()
        assert raw[:4] == b"TVIT"
        version, hlen = struct.unpack("<II", raw[4:12])
        assert version == 1
        text = raw[12 : 12 + hlen].decode()
        assert "kind=latent" in text.splitlines() and "config.dim=12" in text.splitlines()
        (count,) = struct.unpack("<I", raw[12 + hlen : 16 + hlen])
        assert count == len(VitModel(small()).named_parameters())

    def test_ternary_record_dtypes(self, tmp_path):
        model = VitModel(small(), seed=0)
        model.freeze()
        save(model, tmp_path / "t", kind="ternary")
        _, recs = read_records((tmp_path / "t").read_bytes())
        for rec in recs:
            assert rec.dtype == (1 if rec.name.startswith("blocks.") else 0), rec.name

    def test_encoder_bytes_match_size_report(self, tmp_path):
        model = VitModel(VitConfig.preset("tiny"), seed=0)
        model.freeze()
        save(model, tmp_path / "t", kind="ternary")
        _, recs = read_records((tmp_path / "t").read_bytes())
        on_disk = sum(len(r.payload) + 4 for r in recs if r.dtype == 1)
        entries = [e for e in model_io.model_weight_entries(model) if e[3] == "ternary"]
        assert on_disk == packed_size_report(entries).packed_bytes

    def test_tiny_ternary_at_least_15x_smaller(self, tmp_path):
        model = VitModel(VitConfig.preset("tiny"), seed=0)
        latent = save(model, tmp_path / "l")
        model.freeze()
        ternary = save(model, tmp_path / "t", kind="ternary")
        assert latent / ternary >= 15


class TestRejection:
    @pytest.fixture
    def blob(self, tmp_path):
        save(VitModel(small(), seed=0), tmp_path / "m")
        return (tmp_path / "m").read_bytes()

    @pytest.fixture
    def no_build(self, monkeypatch):
        calls = []
        orig = VitModel.__init__

        def spy(self, *a, **k):
            calls.append(1)
            orig(self, *a, **k)

        monkeypatch.setattr(VitModel, "__init__", spy)
        return calls

    def write(self, tmp_path, data):
        p = tmp_path / "bad"
        p.write_bytes(data)
        return p

    @pytest.mark.parametrize("cut", [0, 3, 8, 20, 200, -1])
    def test_truncated(self, tmp_path, blob, no_build, cut):
        with pytest.raises((CheckpointCorruptError, CheckpointFormatError)):
            load(self.write(tmp_path, blob[:cut]))
        assert not no_build

    def test_truncated_every_suffix_is_corrupt(self, tmp_path, blob, no_build):
        for cut in range(4 + 8, len(blob), 97):
            with pytest.raises(CheckpointCorruptError):
                load(self.write(tmp_path, blob[:cut]))
        assert not no_build

    def test_wrong_magic(self, tmp_path, blob, no_build):
        with pytest.raises(CheckpointFormatError):
            load(self.write(tmp_path, b"XVIT" + blob[4:]))
        assert not no_build

    def test_version_999(self, tmp_path, blob, no_build):
        with pytest.raises(UnsupportedVersionError):
            load(self.write(tmp_path, blob[:4] + struct.pack("<I", 999) + blob[8:]))
        assert not no_build

    def test_trailing_bytes(self, tmp_path, blob):
        with pytest.raises(CheckpointCorruptError):
            load(self.write(tmp_path, blob + b"\0"))

    def test_invalid_packed_byte(self, tmp_path):
        model = VitModel(small(), seed=0)
        model.freeze()
        save(model, tmp_path / "t", kind="ternary")
        raw = bytearray((tmp_path / "t").read_bytes())
        _, recs = read_records(bytes(raw))
        first = next(r for r in recs if r.dtype == 1)
        raw[bytes(raw).index(first.payload)] = 250
        with pytest.raises(CheckpointCorruptError):
            load(self.write(tmp_path, bytes(raw)))

    def test_dims_mismatch(self, tmp_path, blob):
        # change the header so the recorded tensors no longer fit the config
        bad = blob.replace(b"config.num_classes=4", b"config.num_classes=5")
        with pytest.raises(CheckpointCorruptError):
            load(self.write(tmp_path, bad))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load(tmp_path / "nope")


def test_documented_example_bytes(tmp_path):
    # the annotated dump in docs/checkpoint_format.md
    cfg = VitConfig(image_size=2, patch_size=2, channels=1, dim=2, depth=1, heads=1, mlp_dim=2, num_classes=2)
    model = VitModel(cfg, seed=0)
    model.freeze(drop_latent=True)
    assert save(model, tmp_path / "example.tvit", kind="ternary") == 764
    raw = (tmp_path / "example.tvit").read_bytes()
    assert raw[:12] == bytes.fromhex("54564954 01000000 ea000000")
    assert raw[0xF6:0xFA] == bytes.fromhex("0c000000")
    assert raw[0x1E0:0x1E6] == bytes.fromhex("7277003f 7578")
