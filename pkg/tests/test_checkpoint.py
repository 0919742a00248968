import hashlib
import json
import struct

import numpy as np
import pytest

import harp
from harp.checkpoint import MAGIC, from_bytes, to_bytes
from harp.errors import CheckpointError, ContractError, FormatVersionError


def sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def repack(data: bytes, mutate):
    """Parse a checkpoint blob, let ``mutate`` edit the header dict, re-serialize."""
    hlen = struct.unpack_from("<Q", data, len(MAGIC))[0]
    header = json.loads(data[len(MAGIC) + 8 : len(MAGIC) + 8 + hlen])
    payload = data[len(MAGIC) + 8 + hlen :]
    mutate(header)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload


def test_save_load_save_round_trip(mini_ckpt, tmp_path):
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    harp.save(mini_ckpt, p1)
    loaded = harp.load(p1)
    harp.save(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert np.array_equal(loaded.embedding, mini_ckpt.embedding)
    assert loaded.seed == mini_ckpt.seed


def test_same_seed_same_bytes_different_seed_differs():
    cfg = harp.PRESETS["mini"]
    a = to_bytes(harp.generate_model(cfg, 7))
    b = to_bytes(harp.generate_model(cfg, 7))
    c = to_bytes(harp.generate_model(cfg, 8))
    assert sha(a) == sha(b)
    assert sha(a) != sha(c)


def test_mini_preset_size_one_to_two_mb(mini_ckpt):
    size = len(to_bytes(mini_ckpt))
    assert 1 << 20 <= size <= 2 << 20


def test_residual_projections_use_smaller_std(mini_ckpt):
    cfg = mini_ckpt.config
    expect = 0.02 / np.sqrt(2 * cfg.num_layers)
    assert abs(float(mini_ckpt.layers[0].w_o.std()) - expect) < expect * 0.2
    assert abs(float(mini_ckpt.layers[0].w_q.std()) - 0.02) < 0.004


def test_truncated_file_rejected(mini_ckpt):
    blob = to_bytes(mini_ckpt)
    with pytest.raises(CheckpointError):
        from_bytes(blob[:-1])
    with pytest.raises(CheckpointError):
        from_bytes(blob + b"\x00")
    with pytest.raises(CheckpointError):
        from_bytes(b"NOTACKPT" + blob[8:])


def test_version_mismatch_names_both_versions(mini_ckpt):
    blob = repack(to_bytes(mini_ckpt), lambda h: h.update(format_version=2))
    with pytest.raises(FormatVersionError, match=r"2.*\[1\]"):
        from_bytes(blob)


def test_header_layer_count_mismatch(mini_ckpt):
    def drop_layer(header):
        header["tensors"] = [t for t in header["tensors"] if not t["name"].startswith("layers.3.")]

    with pytest.raises(CheckpointError, match="missing"):
        from_bytes(repack(to_bytes(mini_ckpt), drop_layer))


def test_header_shape_mismatch(mini_ckpt):
    def bend(header):
        for t in header["tensors"]:
            if t["name"] == "embedding":
                t["shape"] = [128, 128]

    with pytest.raises(CheckpointError):
        from_bytes(repack(to_bytes(mini_ckpt), bend))


def test_invalid_seed_rejected():
    with pytest.raises(ContractError):
        harp.generate_model(harp.PRESETS["mini"], -1)


class TestStrip:
    def test_empty_spec_is_byte_identical(self, mini_ckpt):
        stripped, report = harp.strip(mini_ckpt, harp.PruneSpec(()))
        assert to_bytes(stripped) == to_bytes(mini_ckpt)
        assert report["removed_params"] == 0

    def test_retained_tensors_unchanged_and_qk_dropped(self, mini_ckpt):
        spec = harp.PruneSpec((2, 3), "top_p")
        stripped, report = harp.strip(mini_ckpt, spec)
        assert stripped.layers[2].w_q is None and stripped.layers[3].w_k is None
        assert stripped.layers[2].w_v is mini_ckpt.layers[2].w_v
        assert stripped.pruned_layers == (2, 3)
        cfg = mini_ckpt.config
        qk = cfg.hidden_size * (cfg.num_query_heads * cfg.head_dim + cfg.kv_width)
        assert report["removed_params"] == 2 * qk
        assert report["total_params"] == mini_ckpt.param_count()
        assert report["removed_fraction"] == pytest.approx(2 * qk / mini_ckpt.param_count())

    def test_stripped_round_trip_and_forward_equality(self, mini_ckpt, tmp_path):
        spec = harp.PruneSpec((2, 3), "top_p")
        alphas = {2: 0.4, 3: 1.0}
        stripped, _ = harp.strip(mini_ckpt, spec)
        path = tmp_path / "stripped.ckpt"
        harp.save(stripped, path)
        reloaded = harp.load(path)
        tokens = np.random.default_rng(0).integers(0, 256, 30)
        a = harp.forward(mini_ckpt, tokens, spec, alphas).logits
        b = harp.forward(reloaded, tokens, spec, alphas).logits
        assert np.array_equal(a, b)

    def test_stripped_layer_requires_prune_spec(self, mini_ckpt):
        stripped, _ = harp.strip(mini_ckpt, harp.PruneSpec((3,), "top_p"))
        with pytest.raises(ContractError, match="stripped"):
            harp.forward(stripped, np.arange(4))

    def test_out_of_range_layer(self, mini_ckpt):
        with pytest.raises(ContractError):
            harp.strip(mini_ckpt, harp.PruneSpec((99,)))

    def test_double_strip_keeps_denominator(self, mini_ckpt):
        first, r1 = harp.strip(mini_ckpt, harp.PruneSpec((3,), "top_p"))
        second, r2 = harp.strip(first, harp.PruneSpec((2, 3), "explicit"))
        assert r2["total_params"] == r1["total_params"]
        assert r2["removed_params"] == 2 * (r1["removed_params"])
