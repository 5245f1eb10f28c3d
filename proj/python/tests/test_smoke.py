import json
import math

import numpy as np
import pytest

import iclb


def test_tasks_and_samples():
    assert "segmentation" in iclb.task_names()
    assert len(iclb.in_domain_task_names()) == 5
    phi, t = iclb.make_sample("low_light", 3)
    assert phi.shape == (16, 16, 3) and phi.dtype == np.float32
    np.testing.assert_allclose(phi, 0.3 * t, rtol=1e-6)


def test_low_light_on_constant_image():
    c = np.full((16, 16, 3), 0.6, dtype=np.float32)
    inp, target = iclb.apply_task("low_light", c, 1)
    np.testing.assert_allclose(inp, 0.18, rtol=1e-6)
    np.testing.assert_array_equal(target, c)


def test_metrics():
    a = iclb.gen_base_image(1)
    assert iclb.ssim(a, a) == pytest.approx(1.0)
    assert math.isinf(iclb.psnr(a, a))
    assert iclb.degradation(0.49, 0.05, iclb.Direction.HIGHER_BETTER) == pytest.approx(-89.80, abs=0.01)
    assert iclb.degradation(0.28, 1.10, iclb.Direction.LOWER_BETTER) == pytest.approx(-292.86, abs=0.01)
    _, seg = iclb.make_sample("segmentation", 2)
    assert iclb.miou(seg, seg) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        iclb.ssim(a, np.zeros((8, 8, 3), dtype=np.float32))


def test_poisoning():
    assert iclb.poison_count(485, 0.25) == 121
    assert len(iclb.select_poison_indices(20000, 0.25, 1)) == 5000
    green = iclb.make_green_target(16, 16)
    assert green[..., 1].min() == 1.0 and green[..., 0].max() == 0.0
    img = iclb.gen_base_image(5)
    trig = iclb.apply_trigger(img, 0.25)
    changed = np.any(trig != img, axis=2)
    assert changed[4:, :].sum() == 0 and changed[:, 4:].sum() == 0


def test_model_checkpoint_roundtrip(tmp_path):
    cfg = iclb.ModelConfig()
    cfg.dim, cfg.heads, cfg.depth, cfg.head_depth, cfg.mlp_ratio = 16, 2, 1, 2, 2
    model = iclb.Model(cfg)
    assert model.parameter_count() > 0
    phi1, t1 = iclb.make_sample("denoising", 1)
    phi2, _ = iclb.make_sample("denoising", 2)
    out = model.predict(phi1, t1, phi2)
    assert out.shape == (16, 16, 3)
    assert 0.0 <= out.min() and out.max() <= 1.0
    path = str(tmp_path / "m.ckpt")
    iclb.save_checkpoint(model, path)
    back = iclb.load_checkpoint(path)
    assert back.config == cfg
    np.testing.assert_array_equal(back.predict(phi1, t1, phi2), out)
    with open(path, "r+b") as f:
        f.write(b"XXXX")
    with pytest.raises(ValueError, match="magic"):
        iclb.load_checkpoint(path)


def test_cli_in_process(tmp_path):
    assert json.loads(iclb.default_run_config())["attack"]["epsilon"] == 0.25
    assert iclb.cli(["gen", "--out", str(tmp_path)]) == 0
    manifest = json.loads((tmp_path / "corpus.json").read_text())
    assert manifest["tasks"]["segmentation"]["train"][1] == 2000
    assert iclb.cli(["nope"]) == 2
