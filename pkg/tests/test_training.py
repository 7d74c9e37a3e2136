import csv
import math

import numpy as np
import pytest
import torch

from mcr.datasets import ExampleFactory, PhantomSpec, make_examples, phantom_generate, split_subjects
from mcr.errors import ConfigurationError, NumericalError, ParameterError
from mcr.kspace import forward_fft, zero_filled_recon
from mcr.metrics import psnr
from mcr.model import build_discriminator, build_generator
from mcr.sampling import default_params, mask_bank
from mcr.training import (TrainConfig, chained_recover, lr_schedule, make_optimizer, recover, recover_batch,
                          to_volumes, train)

SMALL = dict(base_features=4, n_resnet_blocks=1, d_feature_ladder=[4, 8], dropout_rate=0.5)
RS = {"T1": "source_full", "T2": "target_heavy:4"}


@pytest.fixture(scope="module")
def phantom():
    return phantom_generate(PhantomSpec(n_subjects=3, slices_per_subject=2, height=32, width=32,
                                        lesion_probability=0.5, seed=5))


@pytest.fixture(scope="module")
def banks():
    return {4.0: mask_bank(32, 32, default_params(4), 3, 10), 2.0: mask_bank(32, 32, default_params(2), 3, 20)}


def small_config(variant="rsGAN", roles=RS, outputs=None, epochs=2, **kw):
    return TrainConfig(variant, roles, outputs, epochs=epochs, decay_start_epoch=max(epochs - 1, 0),
                       seeds={"init": 3, "data": 4, "mask_assignment": 5}, **{**SMALL, **kw})


# ------------------------------------------------------------- schedule / Adam


@pytest.mark.parametrize("base, anchors", [(2e-4, (2e-4, 1e-4, 0.0)), (1e-4, (1e-4, 5e-5, 0.0))])
def test_lr_schedule_anchors(base, anchors):
    got = tuple(lr_schedule(e, base, 100, 200) for e in (0, 150, 200))
    assert got == pytest.approx(anchors, abs=1e-18)
    assert lr_schedule(99, base, 100, 200) == base


def test_lr_schedule_errors():
    with pytest.raises(ParameterError):
        lr_schedule(0, 1e-3, 10, 10)
    with pytest.raises(ParameterError):
        lr_schedule(11, 1e-3, 5, 10)


def test_adam_single_step_by_hand():
    cfg = TrainConfig("rGAN", {"T2": "target_heavy:4"})
    w = torch.tensor([0.3, -1.2], dtype=torch.float64, requires_grad=True)
    opt = make_optimizer([w], 2e-4, cfg)
    # loss = 3*w0^2 + w1^3
    loss = 3 * w[0] ** 2 + w[1] ** 3
    loss.backward()
    g = [6 * 0.3, 3 * 1.44]
    opt.step()
    b1, b2, eps, lr = 0.5, 0.999, 1e-8, 2e-4
    for i, (w0, gi) in enumerate(zip([0.3, -1.2], g)):
        m = (1 - b1) * gi
        v = (1 - b2) * gi * gi
        m_hat, v_hat = m / (1 - b1), v / (1 - b2)
        expected = w0 - lr * m_hat / (math.sqrt(v_hat) + eps)
        assert abs(w[i].item() - expected) < 1e-10


# ---------------------------------------------------------------- config rules


@pytest.mark.parametrize("variant, roles, outputs", [
    ("rGAN", {"T1": "source_full", "T2": "target_heavy:4"}, None),
    ("sGAN", {"T2": "target_heavy:4"}, ["T1"]),
    ("sGAN", {"T1": "source_full"}, None),
    ("sGAN", {"T1": "source_full"}, ["T1"]),
    ("rsGAN", {"T2": "target_heavy:4"}, None),
    ("rsGAN", {"T1": "source_full"}, ["T2"]),
    ("vGAN", {"T2": "target_heavy:4"}, None),
])
def test_variant_role_consistency(variant, roles, outputs):
    with pytest.raises(ConfigurationError):
        TrainConfig(variant, roles, outputs)


def test_config_schedule_validation():
    with pytest.raises(ParameterError):
        TrainConfig("rGAN", {"T2": "target_heavy:4"}, epochs=50)
    assert TrainConfig("rGAN", {"T2": "target_heavy:4"}, epochs=0).epochs == 0
    assert TrainConfig("rsGAN", RS).outputs == ["T1", "T2"]


# -------------------------------------------------------------------- training


def test_zero_epochs_returns_initialization(phantom, banks):
    cfg = small_config(epochs=0)
    ex = make_examples(phantom, banks, cfg.roles, 0, cfg.outputs)
    ckpt, trace = train(cfg, ex)
    assert trace.records == []
    gen = build_generator(cfg.generator_config(), 3)
    disc = build_discriminator(cfg.discriminator_config(), 4)
    for a, b in zip(ckpt.generator.state_dict().values(), gen.state_dict().values()):
        assert torch.equal(a, b)
    for a, b in zip(ckpt.discriminator.state_dict().values(), disc.state_dict().values()):
        assert torch.equal(a, b)


def test_training_is_deterministic(phantom, banks, tmp_path):
    torch.set_num_threads(1)
    cfg = small_config(epochs=3)
    runs = []
    for k in range(2):
        factory = ExampleFactory(phantom, banks, cfg.roles, cfg.outputs, 5)
        ckpt, trace = train(cfg, factory)
        ckpt.save(tmp_path / str(k))
        runs.append((ckpt, trace))
    (a, ta), (b, tb) = runs
    assert ta == tb and len(ta.records) == 3 * 6
    for x, y in zip(a.generator.state_dict().values(), b.generator.state_dict().values()):
        assert torch.equal(x, y)
    for name in ("generator.pt", "discriminator.pt"):
        assert (tmp_path / "0" / name).read_bytes() == (tmp_path / "1" / name).read_bytes()


def test_trace_follows_schedule(phantom, banks, tmp_path):
    cfg = small_config(epochs=4)
    cfg.decay_start_epoch = 2
    ckpt, trace = train(cfg, make_examples(phantom, banks, cfg.roles, 0, cfg.outputs))
    for r in trace.records:
        assert r["g_lr"] == lr_schedule(r["epoch"], 2e-4, 2, 4)
        assert r["d_lr"] == lr_schedule(r["epoch"], 1e-4, 2, 4)
        assert all(math.isfinite(r[k]) for k in ("d_loss", "g_adv", "l1", "g_total"))
        assert r["g_total"] == pytest.approx(100 * r["l1"] + r["g_adv"], rel=1e-6)
    trace.write_csv(tmp_path / "trace.csv")
    rows = list(csv.DictReader(open(tmp_path / "trace.csv")))
    assert len(rows) == len(trace.records) and float(rows[-1]["l1"]) == trace.records[-1]["l1"]
    assert ckpt.manifest()["train_config"]["dc_lambda"] == "inf"


def test_factory_redraws_masks_each_epoch(phantom, banks):
    cfg = small_config(epochs=3)
    seen = []

    class Counting(ExampleFactory):
        def for_epoch(self, epoch):
            seen.append(epoch)
            return super().for_epoch(epoch)

    factory = Counting(phantom, banks, cfg.roles, cfg.outputs, 5)
    train(cfg, factory)
    assert seen == [0, 1, 2]
    seeds = [[m.seed for _, m in ex.acquired] for ex in factory.for_epoch(0)]
    assert seeds != [[m.seed for _, m in ex.acquired] for ex in factory.for_epoch(1)]


def test_role_mismatch_rejected(phantom, banks):
    ex = make_examples(phantom, banks, {"T2": "target_heavy:4"}, 0)
    with pytest.raises(ConfigurationError):
        train(small_config(), ex)


def test_non_finite_loss_aborts_with_trace(phantom, banks, tmp_path):
    cfg = small_config(epochs=1)
    ex = make_examples(phantom, banks, cfg.roles, 0, cfg.outputs)
    ex[0].targets = ex[0].targets * np.nan
    with pytest.raises(NumericalError):
        train(cfg, ex[:1], trace_path=tmp_path / "dump.csv")
    assert (tmp_path / "dump.csv").exists()


def test_validation_scores_recorded(phantom, banks):
    cfg = small_config(epochs=2)
    ex = make_examples(phantom, banks, cfg.roles, 0, cfg.outputs)
    _, trace = train(cfg, ex[:3], validation=ex[3:])
    assert [e for e, _ in trace.validation] == [0, 1]
    assert all(v > 0 for _, v in trace.validation)


# -------------------------------------------------------------------- recovery


@pytest.fixture(scope="module")
def trained(phantom, banks):
    out = {}
    for name, variant, roles, outputs in [
        ("rsGAN", "rsGAN", RS, None),
        ("rGAN", "rGAN", {"T2": "target_heavy:4"}, None),
        ("sGAN", "sGAN", {"T1": "source_full"}, ["T2"]),
        ("src", "rGAN", {"T1": "target_heavy:2"}, None),
    ]:
        cfg = small_config(variant, roles, outputs, epochs=1)
        out[name] = train(cfg, make_examples(phantom, banks, cfg.roles, 0, cfg.outputs))[0]
    return out


def test_full_mask_target_recovers_reference(phantom, trained):
    ex = make_examples(phantom, {}, {"T1": "source_full", "T2": "target_heavy:1"}, 0)
    for e in ex:
        got = recover(trained["rsGAN"], e)
        assert np.max(np.abs(got["T2"] - e.reference("T2"))) < 1e-6


def test_dc_outputs_match_acquired_samples(phantom, banks, trained):
    ex = make_examples(phantom, banks, RS, 1)
    for e, got in zip(ex, recover_batch(trained["rsGAN"], ex)):
        kspace, mask = e.acquisition("T2")
        spec = forward_fft(got["T2"])
        acq = kspace[mask.bits]
        assert np.max(np.abs(spec[mask.bits] - acq)) <= 1e-5 * np.max(np.abs(acq))


def test_sgan_ignores_target_acquisitions(phantom, banks, trained):
    ex = make_examples(phantom, banks, {"T1": "source_full"}, 0, ["T2"])
    targets = make_examples(phantom, banks, {"T2": "target_heavy:4"}, 0)
    plain = recover_batch(trained["sGAN"], ex)
    given = recover_batch(trained["sGAN"], ex, acquired=[{"T2": t.acquisition("T2")} for t in targets])
    for a, b in zip(plain, given):
        assert a["T2"].tobytes() == b["T2"].tobytes()


def test_rgan_and_rsgan_coincide_at_unit_acceleration(phantom, trained):
    rs = make_examples(phantom, {}, {"T1": "source_full", "T2": "target_heavy:1"}, 0)
    r = make_examples(phantom, {}, {"T2": "target_heavy:1"}, 0)
    for a, b in zip(recover_batch(trained["rsGAN"], rs), recover_batch(trained["rGAN"], r)):
        assert np.array_equal(a["T2"], b["T2"])


def test_recover_rejects_wrong_roles(phantom, banks, trained):
    ex = make_examples(phantom, banks, {"T2": "target_heavy:4"}, 0)
    with pytest.raises(ConfigurationError):
        recover(trained["rsGAN"], ex[0])


def test_missing_acquisition_is_configuration_error(phantom, banks, trained):
    ex = make_examples(phantom, banks, RS, 0)[0]
    ex.acquired = [ex.acquired[0], None]
    with pytest.raises(ConfigurationError):
        recover(trained["rsGAN"], ex)


def test_finite_dc_weight_blends(phantom, banks, trained):
    ex = make_examples(phantom, banks, RS, 0)[0]
    hard = recover(trained["rsGAN"], ex)["T2"]
    none = recover(trained["rsGAN"], ex, dc_lambda=0.0)["T2"]
    half = recover(trained["rsGAN"], ex, dc_lambda=1.0)["T2"]
    assert np.allclose(half, (hard + none) / 2, atol=1e-6)


def test_chain_with_full_source_matches_direct(phantom, banks, trained):
    light = {"T1": "source_light:1", "T2": "target_heavy:4"}
    ex = make_examples(phantom, banks, light, 2)
    direct = recover_batch(trained["rsGAN"], make_examples(phantom, banks, RS, 2))
    chained = chained_recover(trained["src"], trained["rsGAN"], ex)
    for a, b in zip(direct, chained):
        assert np.max(np.abs(a["T2"] - b["T2"])) < 1e-4
    again = chained_recover(trained["src"], trained["rsGAN"], ex)
    assert all(np.array_equal(a["T2"], b["T2"]) for a, b in zip(chained, again))


def test_chain_label_mismatch(phantom, banks, trained):
    ex = make_examples(phantom, banks, {"T1": "source_light:2", "T2": "target_heavy:4"}, 2)
    with pytest.raises(ConfigurationError):
        chained_recover(trained["rGAN"], trained["rsGAN"], ex)
    with pytest.raises(ConfigurationError):
        chained_recover(trained["sGAN"], trained["rsGAN"], ex)


def test_to_volumes_groups_by_subject(phantom, banks, trained):
    ex = make_examples(phantom, banks, RS, 0)
    vols = to_volumes(recover_batch(trained["rsGAN"], ex), ex, method="rsGAN", target_R=4.0)
    assert len(vols) == 3 * 2
    for v in vols:
        assert v.shape == (2, 32, 32) and v.provenance["method"] == "rsGAN"


# ------------------------------------------------------ learned improvements


@pytest.fixture(scope="module")
def study64():
    vols = phantom_generate(PhantomSpec(n_subjects=6, slices_per_subject=4, height=64, width=64,
                                        lesion_probability=0.3, blur_sigma=0.5, seed=21))
    train_ids, test_ids = split_subjects(list(vols), 0.67, 0)
    banks = {50.0: mask_bank(64, 64, default_params(50), 8, 500),
             2.0: mask_bank(64, 64, default_params(2), 8, 900)}
    return {s: vols[s] for s in train_ids}, {s: vols[s] for s in test_ids}, banks


@pytest.mark.slow
def test_rsgan_beats_zero_filled_at_r50(study64):
    train_vols, test_vols, banks = study64
    roles = {"T1": "source_full", "T2": "target_heavy:50"}
    cfg = TrainConfig("rsGAN", roles, epochs=6, decay_start_epoch=3, base_features=8, n_resnet_blocks=2,
                      d_feature_ladder=[8, 16, 32], seeds={"init": 0, "data": 1, "mask_assignment": 2})
    ckpt, _ = train(cfg, ExampleFactory(train_vols, banks, cfg.roles, cfg.outputs, 2))
    ex = make_examples(test_vols, banks, roles, 7)
    rec = recover_batch(ckpt, ex)
    gan = np.mean([psnr(e.reference("T2"), np.clip(r["T2"], 0, 1)) for e, r in zip(ex, rec)])
    zf = np.mean([psnr(e.reference("T2"), np.clip(np.abs(zero_filled_recon(*e.acquisition("T2"))), 0, 1))
                  for e in ex])
    assert gan > zf


@pytest.mark.slow
def test_chained_stage_one_beats_zero_filled_source(study64):
    train_vols, test_vols, banks = study64
    cfg = TrainConfig("rGAN", {"T1": "target_heavy:2"}, epochs=40, decay_start_epoch=20, base_features=8,
                      n_resnet_blocks=2, d_feature_ladder=[8, 16, 32], seeds={"init": 0, "data": 1})
    src, _ = train(cfg, ExampleFactory(train_vols, banks, cfg.roles, cfg.outputs, 2))
    down_cfg = TrainConfig("rsGAN", {"T1": "source_full", "T2": "target_heavy:50"}, epochs=0, base_features=8,
                           n_resnet_blocks=2, d_feature_ladder=[8, 16, 32])
    down, _ = train(down_cfg, [])
    ex = make_examples(test_vols, banks, {"T1": "source_light:2", "T2": "target_heavy:50"}, 3)
    out = chained_recover(src, down, ex)
    stage1 = np.mean([psnr(e.reference("T1"), np.clip(o["T1"], 0, 1)) for e, o in zip(ex, out)])
    zf = np.mean([psnr(e.reference("T1"), np.clip(np.abs(zero_filled_recon(*e.acquisition("T1"))), 0, 1))
                  for e in ex])
    assert stage1 > zf
