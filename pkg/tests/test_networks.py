import pytest
import torch

from cgrp.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from cgrp.cpstn import (
    CPSTN,
    DiscriminatorConfig,
    IdentityTranslator,
    PatchDiscriminator,
    TranslatorConfig,
    UNetResGenerator,
)
from cgrp.difn import DIFN, DIFNConfig, DualFeatures, InteractionFusion
from cgrp.geometry import upsample_field
from cgrp.mrrn import MRRN, MRRNConfig, zero_module
from cgrp.pipeline import CGRPModel, count_params


@pytest.fixture(scope="module")
def model():
    return CGRPModel.create(0)


def _img(*shape, seed=0):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed))


# -- translator --------------------------------------------------------------

def test_generator_shape_and_range():
    g = UNetResGenerator(TranslatorConfig(base_width=4, n_res_blocks=1))
    out = g(_img(2, 1, 16, 12))
    assert out.shape == (2, 1, 16, 12)
    assert out.min() >= 0 and out.max() <= 1


def test_generator_rejects_indivisible_size():
    g = UNetResGenerator(TranslatorConfig(base_width=4, n_res_blocks=1))
    with pytest.raises(ValueError, match="divisible"):
        g(_img(1, 1, 10, 12))


def test_translator_config_validation():
    with pytest.raises(ValueError):
        TranslatorConfig(norm="group")
    with pytest.raises(ValueError):
        TranslatorConfig(n_res_blocks=0)


@pytest.mark.parametrize("n", [64, 70, 256])
def test_discriminator_output_size(n):
    d = PatchDiscriminator(DiscriminatorConfig(base_width=8))
    out = d(_img(1, 1, n, n))
    assert out.shape[-1] == d.output_size(n)


def test_cycle_paths_wiring():
    c = CPSTN(TranslatorConfig(base_width=4, n_res_blocks=1), DiscriminatorConfig(base_width=4))
    vis, ir = _img(1, 1, 16, 16, seed=1), _img(1, 1, 16, 16, seed=2)
    p = c.forward_cycles(vis, ir)
    assert torch.equal(p.fake_ir, c.G_A(vis)) and torch.equal(p.fake_vis, c.G_B(ir))
    assert torch.equal(p.rec_ir, c.G_A(p.fake_vis)) and torch.equal(p.rec_vis, c.G_B(p.fake_ir))
    assert p.cycle_vis is p.rec_vis and p.cycle_ir is p.rec_ir
    with pytest.raises(ValueError):
        c.translate(vis, "ir->thermal")
    with pytest.raises(ValueError):
        c.forward_cycles(vis, ir[..., :8])


def test_identity_translator():
    x = _img(1, 1, 4, 4)
    assert torch.equal(IdentityTranslator()(x), x)


# -- registration ------------------------------------------------------------

def test_field_shape_and_near_zero_init():
    m = MRRN()
    field, levels = m(_img(2, 1, 32, 32, seed=1), _img(2, 1, 32, 32, seed=2))
    assert field.shape == (2, 2, 32, 32)
    assert [f.shape[-1] for f in levels.refined] == [32, 16, 8]
    assert field.abs().max() < 1e-2


def test_zeroed_refinement_keeps_coarse_field():
    m = MRRN()
    for head in m.refine:
        zero_module(head)
    _, levels = m(_img(1, 1, 32, 32, seed=3), _img(1, 1, 32, 32, seed=4))
    for c, r in zip(levels.coarse, levels.refined):
        assert torch.equal(c, r)


def test_warm_start_propagates_upsampled_field():
    m = MRRN()
    # zero every head at the finer levels: they then pass the warm start through
    for k in range(m.config.levels - 1):
        zero_module(m.coarse[k])
        zero_module(m.refine[k])
    _, levels = m(_img(1, 1, 32, 32, seed=5), _img(1, 1, 32, 32, seed=6))
    expected = upsample_field(upsample_field(levels.refined[2]))
    assert torch.allclose(levels.refined[0], expected, atol=1e-7)


def test_zero_field_register_is_identity():
    x = _img(2, 1, 16, 16)
    assert torch.equal(MRRN.register(x, torch.zeros(2, 2, 16, 16)), x)


def test_indivisible_input_and_padding():
    with pytest.raises(ValueError, match="divisible"):
        MRRN()(_img(1, 1, 30, 32), _img(1, 1, 30, 32))
    field, _ = MRRN(MRRNConfig(pad=True))(_img(1, 1, 30, 33), _img(1, 1, 30, 33))
    assert field.shape == (1, 2, 30, 33)


def test_mrrn_config_validation():
    with pytest.raises(ValueError):
        MRRNConfig(level_widths=(8, 16), coarse_widths=(8,))


# -- fusion ------------------------------------------------------------------

def test_difn_output_shape_and_range():
    d = DIFN()
    out = d(_img(2, 1, 16, 16, seed=1), _img(2, 1, 16, 16, seed=2))
    assert out.shape == (2, 1, 16, 16)
    assert out.min() >= 0 and out.max() <= 1


def test_zeroed_projections_give_one_and_a_half_gain():
    ifm = InteractionFusion(8)
    zero_module(ifm.proj_ir)
    zero_module(ifm.proj_vis)
    f_ir, f_vis = torch.randn(2, 8, 5, 5), torch.randn(2, 8, 5, 5)
    a_ir, a_vis = ifm.activate(DualFeatures(f_ir, f_vis))
    assert torch.equal(a_ir, 1.5 * f_ir) and torch.equal(a_vis, 1.5 * f_vis)


def test_attention_is_shared_and_bounded():
    ifm = InteractionFusion(8)
    df = DualFeatures(torch.randn(1, 8, 4, 4), torch.randn(1, 8, 4, 4))
    att = ifm.attention(df)
    assert att.shape == (1, 1, 4, 4)
    a_ir, _ = ifm.activate(df)
    assert torch.allclose(a_ir, df.ir * (1 + att))


def test_ifm_off_is_plain_concatenation():
    ifm = InteractionFusion(8, use_ifm=False)
    df = DualFeatures(torch.randn(1, 8, 4, 4), torch.randn(1, 8, 4, 4))
    a_ir, a_vis = ifm.activate(df)
    assert a_ir is df.ir and a_vis is df.vis


def test_tied_projections_share_parameters():
    ifm = InteractionFusion(8, tie_projections=True)
    assert ifm.proj_ir is ifm.proj_vis


def test_dual_feature_shape_check():
    with pytest.raises(ValueError):
        DualFeatures(torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 3, 4))
    with pytest.raises(ValueError):
        DIFN().extract_dual(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))


# -- model, accounting, checkpoints ------------------------------------------

def test_param_counts(model):
    counts = count_params(model)
    assert counts["mrrn"] == 682_236 and counts["difn"] == 117_443
    assert counts["registration+fusion"] == counts["mrrn"] + counts["difn"] == 799_679
    assert counts["cpstn"] == sum(counts[k] for k in ("cpstn.G_A", "cpstn.G_B", "cpstn.D_ir", "cpstn.D_vis"))
    assert counts["total"] == counts["cpstn"] + counts["registration+fusion"]
    assert counts["total"] == sum(p.numel() for p in model.parameters())
    assert abs(counts["registration+fusion"] - 0.80e6) <= 0.25 * 0.80e6


def test_param_count_of_plain_and_zero_modules():
    assert count_params(torch.nn.Identity()) == {"total": 0}
    assert count_params(torch.nn.Linear(3, 2)) == {"total": 8}


def test_create_is_seeded():
    a, b = CGRPModel.create(3), CGRPModel.create(3)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_infer_outputs_and_ablation_switches(model):
    vis, ir = _img(1, 1, 32, 32, seed=1), _img(1, 1, 32, 32, seed=2)
    out = model.infer(vis, ir)
    assert set(out) == {"pseudo_ir", "field", "ir_reg", "fused"}
    assert all(v.shape[-2:] == (32, 32) for v in out.values())
    raw = model.infer(vis, ir, disable_mrrn=True)
    assert torch.equal(raw["ir_reg"], ir) and not raw["field"].any()
    assert torch.equal(model.infer(vis, ir, disable_cpstn=True)["pseudo_ir"], vis)
    assert model.difn.ifm.use_ifm
    model.infer(vis, ir, disable_ifm=True)
    assert model.difn.ifm.use_ifm


def test_checkpoint_byte_round_trip(tmp_path, model):
    model.stages = ["cpstn"]
    model.step = 7
    save_checkpoint(model.to_checkpoint({"note": "x"}), tmp_path / "a.ckpt")
    loaded = CGRPModel.from_checkpoint(tmp_path / "a.ckpt")
    assert loaded.stages == ["cpstn"] and loaded.step == 7
    save_checkpoint(loaded.to_checkpoint({"note": "x"}), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert count_params(tmp_path / "a.ckpt") == count_params(model)
    model.stages, model.step = [], 0


def test_checkpoint_errors(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")
    ckpt = Checkpoint({"w": torch.zeros(2)}, configs=CGRPModel.create(0).configs())
    with pytest.raises(CheckpointError, match="layout"):
        CGRPModel.from_checkpoint(ckpt)


def test_checkpoint_block_prefix():
    ckpt = Checkpoint({"mrrn.a": torch.ones(1), "difn.b": torch.zeros(1)})
    assert list(ckpt.block("mrrn")) == ["a"]
