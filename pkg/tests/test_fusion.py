import json
import struct

import numpy as np
import pytest
import yaml

from dcmoe import fusion
from dcmoe.fusion import Checkpoint, CheckpointError, FusionPlan, average_shared, fuse, split_ffn
from dcmoe.model import Batch, ModelConfig, TransformerModel, param_shapes
from dcmoe.moe_layer import ffn_np
from dcmoe.numcore import Rng
from oracles import random_ffn

DENSE = ModelConfig(n_layers=2, d_model=16, n_heads=2, vocab_size=13, n_channels=2, max_seq_len=10,
                    ffn_hidden=20)


def dense_checkpoint(seed, cfg=DENSE, domain="A"):
    return Checkpoint(cfg, TransformerModel(cfg, seed=seed).state_dict(), {"stage": "specialist",
                                                                          "domain": domain})


def specialists_sharing_backbone(seed=0):
    """Four dense checkpoints that differ only in their FFN weights."""
    base = dense_checkpoint(seed).tensors
    out = []
    for s in range(4):
        t = dict(base)
        for layer in range(DENSE.n_layers):
            ffn = random_ffn(Rng(seed, ("spec", s, layer)), DENSE.d_model, DENSE.ffn_hidden)
            for k, v in ffn.items():
                t[f"layers.{layer}.ffn.{k}"] = v
        out.append(Checkpoint(DENSE, t, {"stage": "specialist", "domain": "ABCD"[s]}))
    return out


# ------------------------------------------------------------------ split

def test_split_sum_exact():
    r = Rng(0)
    dense = random_ffn(r, 16, 20)
    x = r.normal((50, 16))
    halves = split_ffn(dense, 2)
    total = sum(ffn_np(h, x) for h in halves)
    assert np.max(np.abs(total - ffn_np(dense, x))) <= 1e-12


def test_split_one_part_is_identity():
    dense = random_ffn(Rng(1), 8, 6)
    (only,) = split_ffn(dense, 1)
    for k in dense:
        assert np.array_equal(only[k], dense[k])


def test_split_four_parts_on_width_eight():
    dense = random_ffn(Rng(2), 5, 8)
    parts = split_ffn(dense, 4)
    assert [p["w_in"].shape for p in parts] == [(5, 2)] * 4
    x = Rng(3).normal((9, 5))
    assert np.max(np.abs(sum(ffn_np(p, x) for p in parts) - ffn_np(dense, x))) <= 1e-12


def test_split_indivisible():
    with pytest.raises(ValueError):
        split_ffn(random_ffn(Rng(0), 4, 7), 2)


# --------------------------------------------------------------- average

def test_average_shared():
    r = Rng(4)
    w = r.normal((3, 3))
    assert np.array_equal(average_shared([{"w": w}] * 3, ["w"])["w"], w)
    assert average_shared([{"w": w}] * 3, ["w"])["w"] is not w
    assert np.all(average_shared([{"w": w}, {"w": -w}], ["w"])["w"] == 0)
    srcs = [{"w": r.normal((4, 5))} for _ in range(4)]
    ref = np.array([[sum(s["w"][i, j] for s in srcs) / 4 for j in range(5)] for i in range(4)])
    assert np.max(np.abs(average_shared(srcs, ["w"])["w"] - ref)) <= 1e-12
    with pytest.raises(ValueError):
        average_shared([{"w": np.ones(2)}, {"w": np.ones(3)}], ["w"])


# ------------------------------------------------------------------ fuse

def test_fuse_layout_and_frozen_mask():
    srcs = [dense_checkpoint(s, domain=d) for s, d in enumerate("ABCD")]
    fused = fuse(FusionPlan(list(zip("ABCD", srcs))))
    cfg = fused.config
    assert cfg.moe.n_routed == 8 and cfg.moe.n_null == 1 and cfg.moe.n_shared == 2
    assert cfg.moe.expert_hidden == DENSE.ffn_hidden // 2
    routed = sorted(n for n in param_shapes(cfg) if ".moe.routed." in n)
    assert fused.frozen == routed
    assert fused.metadata["stage"] == "fused" and fused.metadata["domains"] == list("ABCD")
    # source s, part j -> routed expert 2s + j
    for s, src in enumerate(srcs):
        for j in range(2):
            np.testing.assert_array_equal(fused.tensors[f"layers.1.moe.routed.{2 * s + j}.w_in"],
                                          src.tensors["layers.1.ffn.w_in"][:, j * 10:(j + 1) * 10])


def test_fuse_preserves_ffn_parameter_count():
    srcs = [dense_checkpoint(s) for s in range(4)]
    fused = fuse(FusionPlan([(str(i), c) for i, c in enumerate(srcs)]))
    routed = sum(v.size for k, v in fused.tensors.items() if ".moe.routed." in k)
    dense_ffn = sum(v.size for c in srcs for k, v in c.tensors.items() if ".ffn." in k)
    # each split duplicates only the d-sized output bias across the two parts
    extra = 4 * DENSE.n_layers * DENSE.d_model
    assert routed == dense_ffn + extra
    assert sum(v.size for k, v in fused.tensors.items() if ".moe.routed." in k and not k.endswith("b_out")) == \
        sum(v.size for c in srcs for k, v in c.tensors.items() if ".ffn." in k and not k.endswith("b_out"))


def test_fuse_identical_sources_share_backbone():
    src = dense_checkpoint(5)
    fused = fuse(FusionPlan([(d, src) for d in "ABCD"]))
    for name, v in src.tensors.items():
        if ".ffn." not in name:
            assert np.array_equal(fused.tensors[name], v)


def test_fused_pair_reproduces_proto_expert_logits():
    srcs = specialists_sharing_backbone()
    fused = fuse(FusionPlan(list(zip("ABCD", srcs)), shared_init="zeros"))
    batch = Batch(Rng(6).integers(0, 13, (2, 7, 2)), [0, 1])
    for k, src in enumerate(srcs):
        t = dict(fused.tensors)
        for layer in range(DENSE.n_layers):
            t[f"layers.{layer}.moe.gate"] = np.zeros_like(t[f"layers.{layer}.moe.gate"])
            # the two halves get mixing weight 1/2 each, so scale their outputs by 2
            for j in (2 * k, 2 * k + 1):
                for key in ("w_out", "b_out"):
                    t[f"layers.{layer}.moe.routed.{j}.{key}"] = 2.0 * t[f"layers.{layer}.moe.routed.{j}.{key}"]
        model = TransformerModel(fused.config, t)
        offset = np.zeros(9)
        offset[[2 * k, 2 * k + 1]] = 50.0
        model.gate_offsets = {layer: offset for layer in range(DENSE.n_layers)}
        res = model.forward(batch)
        for lo in res.layer_outputs.values():
            assert lo.mask.sum(axis=1).tolist() == [2] * lo.mask.shape[0]
        ref = TransformerModel(DENSE, src.tensors).forward_logits(batch)
        assert np.max(np.abs(res.logits_array() - ref)) <= 1e-8


def test_fuse_expert_order_and_validation():
    srcs = [dense_checkpoint(s) for s in range(4)]
    order = [7, 6, 5, 4, 3, 2, 1, 0]
    fused = fuse(FusionPlan(list(zip("ABCD", srcs)), expert_order=order))
    np.testing.assert_array_equal(fused.tensors["layers.0.moe.routed.7.b_in"],
                                  srcs[0].tensors["layers.0.ffn.b_in"][:10])
    report = fusion.verify_fusion(fused, srcs)
    assert report["max_residual"] < 1e-10
    with pytest.raises(ValueError):
        fuse(FusionPlan(list(zip("ABCD", srcs)), expert_order=[0] * 8))
    other = dense_checkpoint(0, ModelConfig(**{**DENSE.to_dict(), "ffn_hidden": 12}))
    with pytest.raises(CheckpointError):
        fuse(FusionPlan([("A", srcs[0]), ("B", other)]))
    with pytest.raises(CheckpointError):
        fuse(FusionPlan([("A", fused), ("B", fused)]))


def test_fuse_is_deterministic_and_seeded():
    srcs = [dense_checkpoint(s) for s in range(4)]
    a = fusion.to_bytes(fuse(FusionPlan(list(zip("ABCD", srcs)), seed=3)))
    b = fusion.to_bytes(fuse(FusionPlan(list(zip("ABCD", srcs)), seed=3)))
    c = fusion.to_bytes(fuse(FusionPlan(list(zip("ABCD", srcs)), seed=4)))
    assert a == b and a != c


def test_null_denominator_flag_reaches_config():
    srcs = [dense_checkpoint(s) for s in range(2)]
    fused = fuse(FusionPlan(list(zip("AB", srcs)), null_in_denominator=False, n_null=2, n_shared=0))
    assert fused.config.moe.null_in_denominator is False
    assert fused.config.moe.n_routed == 4 and fused.config.moe.n_null == 2


# ------------------------------------------------------------ checkpoints

def test_checkpoint_round_trip(tmp_path):
    srcs = [dense_checkpoint(s) for s in range(4)]
    fused = fuse(FusionPlan(list(zip("ABCD", srcs))))
    p1 = fusion.save(fused, tmp_path / "a.ckpt")
    loaded = fusion.load(p1)
    assert loaded.config == fused.config and loaded.metadata == fused.metadata
    for k, v in fused.tensors.items():
        assert v.tobytes() == loaded.tensors[k].tobytes()
    p2 = fusion.save(loaded, tmp_path / "b.ckpt")
    assert p1.read_bytes() == p2.read_bytes()
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".tmp")]


def test_checkpoint_byte_layout():
    ck = dense_checkpoint(0)
    buf = fusion.to_bytes(ck)
    magic, version, hdr_len = struct.unpack_from("<8sIQ", buf, 0)
    assert magic == b"DCMOECKP" and version == 1
    header = json.loads(buf[20:20 + hdr_len])
    names = [e["name"] for e in header["tensors"]]
    assert names == sorted(ck.tensors)
    e = header["tensors"][0]
    payload = buf[20 + hdr_len:]
    arr = np.frombuffer(payload[e["offset"]:e["offset"] + e["nbytes"]], dtype="<f8").reshape(e["shape"])
    assert np.array_equal(arr, ck.tensors[e["name"]])


def test_checkpoint_rejects_bad_input(tmp_path):
    buf = fusion.to_bytes(dense_checkpoint(0))
    with pytest.raises(CheckpointError):
        fusion.from_bytes(b"NOTACKPT" + buf[8:])
    with pytest.raises(CheckpointError):
        fusion.from_bytes(buf[:-5])
    with pytest.raises(CheckpointError):
        fusion.from_bytes(buf[:8] + struct.pack("<I", 99) + buf[12:])
    t = dense_checkpoint(0).tensors
    t.pop("pos")
    with pytest.raises(CheckpointError):
        Checkpoint(DENSE, t)


def test_fusion_plan_from_yaml(tmp_path):
    for s, d in enumerate("ABCD"):
        fusion.save(dense_checkpoint(s, domain=d), tmp_path / "ckpts" / f"{d}.ckpt")
    plan_file = tmp_path / "plan.yaml"
    plan_file.write_text(yaml.safe_dump({
        "sources": [{"domain": d, "path": f"ckpts/{d}.ckpt"} for d in "ABCD"],
        "n_null": 2, "n_shared": 1, "seed": 7}))
    plan = fusion.load_plan(plan_file)
    fused = fuse(plan)
    assert fused.config.moe.n_null == 2 and fused.config.moe.n_shared == 1
    assert fused.metadata["domains"] == list("ABCD") and fused.metadata["seed"] == 7
    with pytest.raises(ValueError):
        plan_file.write_text("n_null: 1\n")
        fusion.load_plan(plan_file)
