import pytest
import torch

from cgrp.datasets import DistortionRanges, distort_corpus, synthetic_corpus
from cgrp.losses import parse_record
from cgrp.pipeline import CGRPModel
from cgrp.trainer import MissingStageError, RunLedger, TrainConfig, time_inference, train_stage


@pytest.fixture(scope="module")
def records():
    return distort_corpus(synthetic_corpus(4, 32, 0), DistortionRanges(3, 3, 0, 0, 6, 3), seed=0)


def _cfg(stage, steps, small_weights, **kw):
    kw.setdefault("pseudo_source", "aligned")
    return TrainConfig(stage=stage, batch_size=2, patch=32, max_steps=steps, loss=small_weights, seed=0, **kw)


def _snapshot(module):
    return {k: v.clone() for k, v in module.state_dict().items()}


def test_fixed_seed_reproduces_losses(records, small_weights, backbone_float):
    runs = []
    for _ in range(2):
        cfg = _cfg("cpstn", 10, small_weights)
        _, ledger, _ = train_stage(cfg, records, CGRPModel.create(0), backbone=backbone_float)
        runs.append(ledger.losses())
    assert len(runs[0]) == 10
    assert runs[0] == runs[1]


def test_stage_freezes_other_subnetworks(records, small_weights, backbone_float):
    model = CGRPModel.create(1)
    before = {n: _snapshot(model.subnetwork(n)) for n in ("cpstn", "difn", "mrrn")}
    train_stage(_cfg("mrrn", 3, small_weights), records, model, backbone=backbone_float)
    for name in ("cpstn", "difn"):
        after = model.subnetwork(name).state_dict()
        assert all(torch.equal(before[name][k], after[k]) for k in after)
    after = model.mrrn.state_dict()
    assert any(not torch.equal(before["mrrn"][k], after[k]) for k in after)
    assert model.stages == ["mrrn"] and model.step == 3


def test_missing_stage_is_refused(records, small_weights, backbone_float):
    with pytest.raises(MissingStageError, match="cpstn"):
        train_stage(_cfg("mrrn", 1, small_weights, pseudo_source="cpstn"), records,
                    CGRPModel.create(0), backbone=backbone_float)
    with pytest.raises(MissingStageError, match="mrrn"):
        train_stage(_cfg("difn", 1, small_weights), records, CGRPModel.create(0))
    with pytest.raises(MissingStageError):
        train_stage(_cfg("joint", 1, small_weights), records)


def test_one_epoch_smoke_and_checkpoints(tmp_path, records, small_weights, backbone_float):
    cfg = TrainConfig(stage="mrrn", batch_size=2, patch=32, epochs=1, loss=small_weights,
                      pseudo_source="visible", checkpoint_every=1)
    model, ledger, path = train_stage(cfg, records[:2], CGRPModel.create(0), backbone=backbone_float,
                                      out_dir=tmp_path)
    assert len(ledger.records) == 1
    assert path == tmp_path / "mrrn" / "1.ckpt" and path.is_file()
    lines = (tmp_path / "mrrn" / "ledger.txt").read_text().splitlines()
    rec = parse_record(lines[0])
    assert rec["step"] == 1 and rec["stage"] == "mrrn" and "L_reg" in rec and "smooth" in rec
    assert ledger.param_counts["registration+fusion"] == 799_679
    loaded = CGRPModel.from_checkpoint(path)
    assert loaded.stages == ["mrrn"]


def test_full_stage_chain(records, small_weights, backbone_float):
    model = CGRPModel.create(0)
    for stage in ("cpstn", "mrrn", "difn", "joint"):
        cfg = _cfg(stage, 1, small_weights, pseudo_source="cpstn")
        model, ledger, _ = train_stage(cfg, records, model, backbone=backbone_float)
        assert all(torch.isfinite(torch.tensor(v)) for v in ledger.losses())
    assert model.stages == ["cpstn", "mrrn", "difn", "joint"]
    keys = set(ledger.records[-1])
    assert {"L_pst", "L_cross", "L_GAN", "L_reg", "L_fus", "L_total", "gan_d"} <= keys


def test_ledger_step_must_increase():
    led = RunLedger()
    led.log(1, "mrrn", {"L_total": 1.0}, 0.1)
    with pytest.raises(ValueError):
        led.log(1, "mrrn", {"L_total": 1.0}, 0.1)


def test_config_validation_and_steps():
    with pytest.raises(ValueError):
        TrainConfig(stage="warmup")
    with pytest.raises(ValueError):
        TrainConfig(pseudo_source="thermal")
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    assert TrainConfig(batch_size=8, epochs=300).steps(221) == 300 * 28
    assert TrainConfig(batch_size=8, max_steps=5).steps(221) == 5
    d = TrainConfig().to_dict()
    assert TrainConfig(**d).to_dict() == d


def test_empty_records_rejected(small_weights):
    with pytest.raises(ValueError):
        train_stage(_cfg("cpstn", 1, small_weights), [])


def test_time_inference_sanity():
    mean, std = time_inference(CGRPModel.create(0), size=32, runs=3, warmup=1)
    assert mean > 0 and std >= 0
    with pytest.raises(ValueError):
        time_inference(CGRPModel.create(0), runs=1)
