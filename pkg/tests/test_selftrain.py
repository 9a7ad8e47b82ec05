import csv
import math

import numpy as np
import pytest
import torch

from corda.datasets import Domain, load_all
from corda.errors import ConfigError, ContractError
from corda.losses import LOSS_TERMS
from corda.model import load_checkpoint
from corda.selftrain import (
    LOG_COLUMNS,
    PseudoLabel,
    TrainConfig,
    Variant,
    build_model,
    classmix,
    collate,
    generate_pseudo_labels,
    joint_forward,
    make_optimizer,
    poly_lr,
    pseudo_labels_from_logits,
    select_mix_classes,
    train,
    train_step,
)

from conftest import randomize


# -- schedule ---------------------------------------------------------------


def test_poly_lr_values():
    assert poly_lr(0, 0.1, 0.9, 100) == 0.1
    assert poly_lr(100, 0.1, 0.9, 100) == 0.0
    assert poly_lr(150, 0.1, 0.9, 100) == 0.0
    assert abs(poly_lr(50, 1.0, 0.9, 100) - 0.5 ** 0.9) < 1e-12


def test_poly_lr_strictly_decreasing():
    lrs = [poly_lr(i, 2.5e-4, 0.9, 50) for i in range(51)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


# -- pseudo-labels ----------------------------------------------------------


def test_saturated_logit_is_confident():
    logits = torch.zeros(1, 5, 2, 2)
    logits[:, 3] = 50.0
    pl = pseudo_labels_from_logits(logits, 0.968)
    assert (pl.labels == 3).all() and pl.confident.all()


def test_uniform_logits_not_confident():
    pl = pseudo_labels_from_logits(torch.zeros(1, 5, 3, 3), 0.968)
    assert torch.allclose(pl.prob, torch.full((1, 3, 3), 0.2))
    assert not pl.confident.any()
    assert pseudo_labels_from_logits(torch.zeros(1, 5, 3, 3), 0.0).confident.all()


def test_generate_pseudo_labels_restores_mode_and_no_grad(tiny_model):
    tiny_model.train()
    x = torch.rand(2, 3, 32, 32)
    pl = generate_pseudo_labels(tiny_model, x, 0.5)
    assert tiny_model.training
    assert not pl.prob.requires_grad
    assert torch.equal(pl.labels, tiny_model.eval()(x, Domain.TARGET).sem_final.argmax(1))


# -- classmix ---------------------------------------------------------------


def _mix_inputs(seed=0, h=16, w=16):
    g = torch.Generator().manual_seed(seed)
    src_img, tgt_img = torch.rand(3, h, w, generator=g), torch.rand(3, h, w, generator=g)
    src_lbl = torch.randint(0, 5, (h, w), generator=g)
    pl = PseudoLabel(labels=torch.randint(0, 5, (h, w), generator=g),
                     confident=torch.rand(h, w, generator=g) > 0.3, prob=torch.rand(h, w, generator=g))
    w_t = torch.rand(h, w, generator=g)
    return src_img, src_lbl, tgt_img, pl, w_t


def test_mix_no_classes_is_target():
    src_img, src_lbl, tgt_img, pl, w_t = _mix_inputs()
    m = classmix(src_img, src_lbl, tgt_img, pl, tgt_weight=w_t, classes=[])
    assert torch.equal(m.image, tgt_img) and torch.equal(m.label, pl.labels)
    assert torch.equal(m.weight, pl.confident.float() * w_t)


def test_mix_all_classes_is_source():
    src_img, src_lbl, tgt_img, pl, _ = _mix_inputs()
    m = classmix(src_img, src_lbl, tgt_img, pl, classes=list(range(5)))
    assert torch.equal(m.image, src_img) and torch.equal(m.label, src_lbl)
    assert (m.weight == 1).all()


@pytest.mark.parametrize("seed", range(5))
def test_mix_pixel_audit(seed):
    src_img, src_lbl, tgt_img, pl, w_t = _mix_inputs(seed)
    m = classmix(src_img, src_lbl, tgt_img, pl, np.random.default_rng(seed), tgt_weight=w_t)
    present = sorted(set(src_lbl.flatten().tolist()))
    assert len(m.classes) == math.ceil(len(present) / 2)
    # pixel-by-pixel reference
    for y in range(16):
        for x in range(16):
            pasted = int(src_lbl[y, x]) in m.classes
            assert bool(m.mask[y, x]) == pasted
            if pasted:
                assert m.label[y, x] == src_lbl[y, x] and m.weight[y, x] == 1.0
                assert torch.equal(m.image[:, y, x], src_img[:, y, x])
            else:
                assert m.label[y, x] == pl.labels[y, x]
                assert m.weight[y, x] == float(pl.confident[y, x]) * w_t[y, x]
                assert torch.equal(m.image[:, y, x], tgt_img[:, y, x])
    assert ((m.weight >= 0) & (m.weight <= 1)).all()


def test_mix_selection_reproducible():
    lbl = torch.randint(0, 5, (16, 16), generator=torch.Generator().manual_seed(0))
    a = select_mix_classes(lbl, np.random.default_rng(3))
    b = select_mix_classes(lbl, np.random.default_rng(3))
    assert a == b


def test_mix_dim_mismatch():
    src_img, src_lbl, tgt_img, pl, _ = _mix_inputs()
    with pytest.raises(ContractError):
        classmix(src_img[:, :8], src_lbl, tgt_img, pl, classes=[])


# -- joint forward ----------------------------------------------------------


def test_joint_forward_matches_separate(tiny_model):
    randomize(tiny_model, seed=3)
    xs, xt = torch.rand(2, 3, 32, 32), torch.rand(1, 3, 32, 32)
    js, jt = joint_forward(tiny_model, [(xs, Domain.SOURCE), (xt, Domain.TARGET)])
    ss, st_ = tiny_model(xs, Domain.SOURCE), tiny_model(xt, Domain.TARGET)
    for a, b in ((js, ss), (jt, st_)):
        for f in ("sem_init", "depth_init", "sem_final", "depth_final"):
            assert torch.allclose(getattr(a, f), getattr(b, f), atol=1e-5)


# -- train step -------------------------------------------------------------


@pytest.fixture
def batches(small_benchmark):
    src, tgt = small_benchmark
    s = load_all(src.split("train"))[:2]
    t = load_all(tgt.split("train"))[:2]
    return collate(s, src.d_min, src.d_max), collate(t, tgt.d_min, tgt.d_max)


def _step(tiny_cfg, batches, variant, seed=0, **kw):
    cfg = TrainConfig(iterations=10, lr=0.01, variant=variant, seed=seed, crop_size=32, **kw)
    model = build_model(tiny_cfg, cfg)
    opt = make_optimizer(model, cfg)
    res = train_step(model, *batches, cfg, opt, 0, np.random.default_rng(seed))
    return model, res


def test_baseline_depth_terms_zero(tiny_cfg, batches):
    _, res = _step(tiny_cfg, batches, Variant.BASELINE)
    for k in ("depth_init_S", "depth_final_S", "depth_init_T", "depth_final_T"):
        assert getattr(res.losses, k).item() == 0.0


def test_corda_f_reports_unit_weights(tiny_cfg, batches):
    _, res = _step(tiny_cfg, batches, Variant.CORDA_F)
    assert res.mean_w == 1.0


def test_corda_fd_tied_decoders_first_step_unit_weight(tiny_cfg, batches):
    _, res = _step(tiny_cfg, batches, Variant.CORDA_FD)
    assert res.mean_w == 1.0


def test_corda_fd_weights_drop_once_decoders_differ(tiny_cfg, batches):
    cfg = TrainConfig(iterations=10, variant=Variant.CORDA_FD, crop_size=32)
    model = build_model(tiny_cfg, cfg)
    randomize(model.depth_decoder_tgt, seed=1)
    from corda.selftrain import target_weights

    _, w, mean_w = target_weights(model, batches[1], cfg)
    assert mean_w < 1.0 and ((w >= 0) & (w <= 1)).all()


def test_step_is_deterministic(tiny_cfg, batches):
    _, a = _step(tiny_cfg, batches, Variant.CORDA_FD, seed=4)
    _, b = _step(tiny_cfg, batches, Variant.CORDA_FD, seed=4)
    fa, fb = a.losses.as_floats(), b.losses.as_floats()
    assert all(abs(fa[k] - fb[k]) < 1e-6 for k in fa)


def test_step_updates_parameters(tiny_cfg, batches):
    cfg = TrainConfig(iterations=10, lr=0.01, variant=Variant.CORDA_FD, crop_size=32)
    model = build_model(tiny_cfg, cfg)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    train_step(model, *batches, cfg, make_optimizer(model, cfg), 0, np.random.default_rng(0))
    changed = [n for n, p in model.named_parameters() if not torch.equal(p, before[n])]
    assert "backbone.0.0.weight" in changed and "depth_decoder_tgt.2.weight" in changed


def test_pseudo_labels_contribute_no_gradient(tiny_cfg, batches):
    """Gradients agree whether pseudo-labels are recomputed inside the step or cached."""
    from corda.losses import total_loss
    from corda.selftrain import target_weights

    cfg = TrainConfig(iterations=10, variant=Variant.CORDA_FD, crop_size=32, threshold=0.2)
    model = build_model(tiny_cfg, cfg)
    randomize(model, seed=11, scale=0.2)
    bs, bt = batches

    def grads(pseudo_w):
        pseudo, w, _ = pseudo_w
        mix = [classmix(bs.image[i], bs.labels[i], bt.image[i],
                        PseudoLabel(pseudo.labels[i], pseudo.confident[i], pseudo.prob[i]),
                        tgt_weight=w[i], classes=[0, 2]) for i in range(2)]
        model.zero_grad()
        out_S, out_M, out_T = joint_forward(model, [(bs.image, Domain.SOURCE),
                                                    (torch.stack([m.image for m in mix]), Domain.TARGET),
                                                    (bt.image, Domain.TARGET)])
        total_loss(out_S, out_M, bs.labels, bs.depth_inv, torch.stack([m.label for m in mix]),
                   torch.stack([m.weight for m in mix]), bt.depth_inv, cfg.loss_weights,
                   bs.valid, bt.valid, out_T).total.backward()
        return [p.grad.clone() for p in model.parameters()]

    cached = target_weights(model, bt, cfg)
    g1 = grads(cached)
    g2 = grads(target_weights(model, bt, cfg))
    assert all(torch.equal(a, b) for a, b in zip(g1, g2))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(threshold=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(iterations=0)
    with pytest.raises(ValueError):
        TrainConfig(variant="nope")


# -- full loop --------------------------------------------------------------


def _read_log(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_train_single_iteration(small_benchmark, tmp_path):
    src, tgt = small_benchmark
    res = train(TrainConfig(iterations=1, crop_size=32), src, tgt, tmp_path)
    rows = _read_log(res.log)
    assert len(rows) == 1 and tuple(rows[0]) == LOG_COLUMNS
    assert rows[0]["miou"] != ""
    assert res.checkpoint.exists() and (tmp_path / "eval_report.json").exists()


def test_train_resume_continues_schedule(small_benchmark, tmp_path):
    src, tgt = small_benchmark
    cfg = TrainConfig(iterations=2, crop_size=32, lr=0.01)
    first = train(cfg, src, tgt, tmp_path)
    cfg4 = TrainConfig(iterations=4, crop_size=32, lr=0.01)
    res = train(cfg4, src, tgt, tmp_path, resume=first.checkpoint)
    rows = _read_log(res.log)
    assert [int(r["iter"]) for r in rows] == [0, 1, 2, 3]
    assert float(rows[2]["lr"]) == pytest.approx(poly_lr(2, 0.01, 0.9, 4))
    _, payload = load_checkpoint(res.checkpoint)
    assert payload["iteration"] == 4


def test_train_log_has_all_terms(small_benchmark, tmp_path):
    src, tgt = small_benchmark
    res = train(TrainConfig(iterations=3, crop_size=32, variant="corda_fd"), src, tgt, tmp_path,
                eval_interval=2)
    rows = _read_log(res.log)
    assert [r["miou"] != "" for r in rows] == [False, True, True]
    for r in rows:
        assert all(math.isfinite(float(r[k])) for k in LOSS_TERMS + ("total", "mean_w"))
