import json
import math

import numpy as np
import pytest
import torch

from textreid.config import ConfigError, OptimConfig
from textreid.data import RetrievalSplit, SyntheticSpec, build_vocab, generate_synthetic
from textreid.encoders import PAD_ID
from textreid.evaluation import compute_embeddings, evaluate_split
from textreid.losses import LossBreakdown, total_loss
from textreid.training import (
    Checkpoint,
    CheckpointError,
    NonFiniteLossError,
    lr_at,
    make_optimizer,
    train,
    train_step,
)
from tiny import tiny_batch, tiny_config, tiny_model


def test_lr_examples():
    cfg = OptimConfig()
    assert lr_at(0, 25, cfg, "encoders") == pytest.approx(1e-6, rel=1e-12)
    assert lr_at(0, 45, cfg, "other") == pytest.approx(1e-7, rel=1e-12)
    assert lr_at(0, 0, cfg, "encoders", steps_per_epoch=10) == pytest.approx(1e-6, rel=1e-12)
    assert lr_at(0, 0, cfg, "other", steps_per_epoch=10) == pytest.approx(1e-5, rel=1e-12)


def test_lr_warmup_is_linear_then_flat():
    cfg = OptimConfig()
    lrs = [lr_at(s, 0, cfg, "other", steps_per_epoch=4) for s in range(4)]
    assert np.allclose(np.diff(lrs), 0.9e-4 / 4)
    assert lr_at(0, 1, cfg, "other") == cfg.lr_other
    assert lr_at(0, 19, cfg, "other") == cfg.lr_other
    assert lr_at(0, 20, cfg, "other") == pytest.approx(1e-5)
    with pytest.raises(ValueError):
        lr_at(0, 1, cfg, "decoder")


def _zero_lr_optimizer(model):
    opt = make_optimizer(model, tiny_config().train)
    for g in opt.param_groups:
        g["lr"] = 0.0
    return opt


def test_zero_lr_steps_are_pure():
    model = tiny_model()
    batch = tiny_batch()
    opt = _zero_lr_optimizer(model)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    a = train_step(model, opt, *batch)
    b = train_step(model, opt, *batch)
    assert a == b
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


def test_repeated_steps_decrease_loss():
    model = tiny_model()
    batch = tiny_batch()
    opt = make_optimizer(model, tiny_config().train)
    totals = [train_step(model, opt, *batch).total for _ in range(7)]
    assert all(b < a for a, b in zip(totals, totals[1:])), totals


def test_breakdown_identity_every_step():
    model = tiny_model()
    opt = make_optimizer(model, tiny_config().train)
    for seed in range(5):
        p = train_step(model, opt, *tiny_batch(seed))
        expect = (p.cm1 + p.cm2) + 1.8 * (p.id1 + p.id2) + 0.2 * p.l2
        assert abs(p.total - expect) <= 1e-9
        assert min(p.cm1, p.cm2, p.id1, p.id2, p.l2) >= 0


def test_total_gradient_is_sum_of_component_gradients():
    model = tiny_model()
    parts = model(*tiny_batch())
    params = [p for p in model.parameters()]

    def grads(t):
        gs = torch.autograd.grad(t, params, retain_graph=True, allow_unused=True)
        return [torch.zeros_like(p) if g is None else g for p, g in zip(params, gs)]

    total = grads(parts.total)
    summed = [torch.zeros_like(p) for p in params]
    for name, w in (("cm1", 1.0), ("cm2", 1.0), ("id1", 1.8), ("id2", 1.8), ("l2", 0.2)):
        for acc, g in zip(summed, grads(getattr(parts, name))):
            acc += w * g
    for t, s in zip(total, summed):
        assert torch.allclose(t, s, atol=1e-7, rtol=0)


def test_gradient_mask_audit():
    model = tiny_model()
    parts = model(*tiny_batch())
    named = dict(model.named_parameters())

    def touched(t):
        gs = torch.autograd.grad(t, list(named.values()), retain_graph=True, allow_unused=True)
        return {n for n, g in zip(named, gs) if g is not None and bool(g.abs().sum() > 0)}

    cm1, cm2 = touched(parts.cm1), touched(parts.cm2)
    id1, id2, l2 = touched(parts.id1), touched(parts.id2), touched(parts.l2)
    assert not any(n.startswith(("pfm.", "ekfr.", "id1_", "id2_")) for n in cm1)
    assert not any(n.startswith(("ekfr.", "cmpc")) for n in id1 | id2 | l2)
    assert not any(n.startswith("id") for n in l2)
    assert not any(n.startswith("id2_") for n in id1) and not any(n.startswith("id1_") for n in id2)
    assert not any("sram" in n for n in id1 | l2)
    assert any(n.startswith("ekfr.") for n in cm2)
    # the padding embedding never reaches a class token or a pooled feature
    pad = "text_encoder.word_embed.weight"
    g = torch.autograd.grad(parts.total, named[pad], retain_graph=True)[0]
    assert torch.count_nonzero(g[PAD_ID]) == 0
    opt = make_optimizer(model, tiny_config().train)
    before = named[pad][PAD_ID].clone()
    train_step(model, opt, *tiny_batch())
    assert torch.equal(named[pad][PAD_ID], before)


def test_baseline_has_no_extra_terms():
    model = tiny_model("model.pfm_stages=0", "model.ekfr=false")
    assert model.is_baseline
    p = model(*tiny_batch())
    assert all(float(getattr(p, n).detach()) == 0.0 for n in ("cm2", "id1", "id2", "l2"))
    assert float(p.total.detach()) == float(p.cm1.detach())


def test_non_finite_loss_aborts():
    model = tiny_model()
    with torch.no_grad():
        model.image_encoder.patch_embed.weight.fill_(float("nan"))
    opt = make_optimizer(model, tiny_config().train)
    with pytest.raises(NonFiniteLossError) as err:
        train_step(model, opt, *tiny_batch())
    assert "cm1=nan" in str(err.value) and set(err.value.parts) >= {"cm1", "id1", "total"}


def test_total_loss_matches_breakdown_helper():
    parts = tiny_model()(*tiny_batch())
    p = parts.as_floats()
    assert p["total"] == total_loss(LossBreakdown(p["cm1"], p["cm2"], p["id1"], p["id2"], p["l2"]))


# --- full loop on a small synthetic set ---------------------------------------------

@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    manifest = generate_synthetic(SyntheticSpec(identities=6, images_per_id=2, seed=4), root)
    vocab = build_vocab(manifest)
    return manifest, vocab


def _small_cfg(*extra):
    return tiny_config("model.dim=16", "model.image_size=32", "model.max_len=16",
                       "train.epochs=2", "train.steps_per_epoch=2", *extra)


def _split(small_data, cfg):
    manifest, vocab = small_data
    return RetrievalSplit(manifest, "train", vocab, cfg.model.image_size, cfg.model.max_len)


def test_train_deterministic_and_logged(small_data, tmp_path):
    cfg = _small_cfg("train.checkpoint_every=1")
    split = _split(small_data, cfg)
    train(split, cfg, small_data[1], out_dir=tmp_path / "a")
    train(split, _small_cfg("train.checkpoint_every=1"), small_data[1], out_dir=tmp_path / "b")
    for name in ("params.bin", "manifest.json", "vocab.txt"):
        assert (tmp_path / "a/final" / name).read_bytes() == (tmp_path / "b/final" / name).read_bytes()
    assert (tmp_path / "a/checkpoints/epoch_0001/params.bin").is_file()
    log = [json.loads(l) for l in (tmp_path / "a/train_log.jsonl").read_text().splitlines()]
    assert len(log) == 4 and log[0]["step"] == 0
    for e in log:
        assert abs(e["total"] - (e["cm1"] + e["cm2"] + 1.8 * (e["id1"] + e["id2"]) + 0.2 * e["l2"])) <= 1e-9


def test_zero_epochs_returns_initialization(small_data):
    cfg = _small_cfg("train.epochs=0")
    split = _split(small_data, cfg)
    ckpt = train(split, cfg, small_data[1])
    torch.manual_seed(cfg.train.seed)
    fresh = ckpt.build_model()
    from textreid.model import build_model
    torch.manual_seed(cfg.train.seed)
    init = build_model(cfg, ckpt.num_classes)
    for k, v in init.state_dict().items():
        assert torch.equal(v, fresh.state_dict()[k])


def test_insufficient_identities(small_data):
    cfg = _small_cfg("train.batch_size=16", "train.P=8", "train.K=2")
    with pytest.raises(ValueError, match="PK sampling"):
        train(_split(small_data, cfg), cfg, small_data[1])


def test_invalid_pk_config():
    with pytest.raises(ConfigError):
        tiny_config("train.P=3").validate()


def test_checkpoint_round_trip(small_data, tmp_path):
    cfg = _small_cfg()
    split = _split(small_data, cfg)
    ckpt = train(split, cfg, small_data[1])
    model = ckpt.build_model()
    ckpt.save(tmp_path / "ck")
    again = Checkpoint.load(tmp_path / "ck")
    loaded = again.build_model()
    assert again.vocab == ckpt.vocab and again.train_config() == ckpt.train_config() and again.epoch == 2
    for k, v in model.state_dict().items():
        assert torch.equal(v, loaded.state_dict()[k])
    m1 = evaluate_split(model, split).metrics()
    m2 = evaluate_split(loaded, split).metrics()
    assert m1 == m2
    manifest = json.loads((tmp_path / "ck/manifest.json").read_text())
    assert {"params", "config", "epoch", "seed", "rng_state", "num_classes"} <= set(manifest)
    first = manifest["params"][0]
    assert set(first) == {"name", "shape", "dtype", "offset"} and first["offset"] == 0


def test_checkpoint_shape_mismatch(small_data, tmp_path):
    cfg = _small_cfg("train.epochs=0")
    ckpt = train(_split(small_data, cfg), cfg, small_data[1])
    other = tiny_model("model.dim=16", "model.image_size=32", "model.max_len=16",
                       f"model.vocab_size={len(small_data[1])}", num_classes=5, dtype=torch.float32)
    with pytest.raises(CheckpointError, match="shape mismatch"):
        ckpt.load_into(other)


def test_checkpoint_missing_dir(tmp_path):
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "nothing")


def test_embeddings_unit_norm_and_composition(small_data):
    cfg = _small_cfg()
    split = _split(small_data, cfg)
    model = train(split, cfg, small_data[1]).build_model(torch.float64)
    img = compute_embeddings(model, images=split.images[:3])
    txt = compute_embeddings(model, token_ids=split.tokens[:3])
    assert np.allclose(np.linalg.norm(img, axis=1), 1, atol=1e-6)
    assert np.allclose(np.linalg.norm(txt, axis=1), 1, atol=1e-6)
    assert np.array_equal(img, compute_embeddings(model, images=split.images[:3]))
    # step-by-step: encoder -> refine_original with the tied refiner -> class token -> normalize
    from textreid.pfm import refine_original
    with torch.no_grad():
        f = model.image_encoder(torch.as_tensor(split.images[:3], dtype=torch.float64))
        o = refine_original(f, model.pfm.passes[0].refiner)[:, 0]
        ref = (o / o.norm(dim=1, keepdim=True)).numpy()
    assert np.allclose(img, ref, atol=1e-12)


def test_untrained_model_is_near_chance(tmp_path):
    manifest = generate_synthetic(SyntheticSpec(identities=16, images_per_id=4, seed=2), tmp_path)
    vocab = build_vocab(manifest)
    cfg = _small_cfg("train.epochs=0")
    split = RetrievalSplit(manifest, "train", vocab, 32, 16)
    m = evaluate_split(train(split, cfg, vocab).build_model(), split).metrics()
    # 128 queries over 16 identities: chance is 1/16, allow wide sampling noise
    assert m["rank1"] < 0.25
    assert math.isfinite(m["mAP"])
