"""End-to-end model wiring: parameter registry, losses per task,
structural gradient masking, and prediction structure."""

import numpy as np
import pytest

from avu.config import ModelConfig
from avu.errors import ContractError
from avu.model import UnifiedModel, token_payload
from avu.synth import SceneGenerator
from avu.tensor import Tape
from avu.tokens import Task
from avu import tensor as tz

CFG = ModelConfig()
GEN = SceneGenerator(CFG, world_seed=0)


@pytest.fixture(scope="module")
def model():
    return UnifiedModel(CFG, seed=0)


def batch_for(task, n=3, seed0=0):
    bundles, _ = GEN.make_dataset(task, n, seed0=seed0)
    return bundles


def test_parameter_registry_is_consistent(model):
    params = model.params()
    assert len(params) > 40
    for name, p in params.items():
        assert p.name == name
    assert model.n_params() > 10_000


def test_matched_seed_params_identical_across_switches():
    base = UnifiedModel(ModelConfig(), seed=7)
    ablated = UnifiedModel(ModelConfig(use_temporal=False, use_spatial=False,
                                       use_prompt=False), seed=7)
    pb, pa = base.params(), ablated.params()
    assert set(pb) == set(pa)
    for name in pb:
        np.testing.assert_array_equal(pb[name].data, pa[name].data)


def test_encode_bundles_shapes(model):
    bundles = batch_for(Task.AVE, 2)
    ctx = model.encode_bundles(bundles)
    L = CFG.unified_length
    assert ctx["unified"].shape == (2, L, CFG.d_model)
    assert ctx["patch_out"].shape == (2, CFG.n_segments, CFG.n_patches,
                                      CFG.d_model)
    assert ctx["audio_sp"].shape == (2, CFG.n_segments, CFG.d_model)
    assert ctx["gain_temporal"].shape == (2, 2 * CFG.n_segments)


@pytest.mark.parametrize("task", list(Task))
def test_task_loss_runs_and_is_finite(model, task):
    bundles = batch_for(task, 3, seed0=int(task) * 10)
    with Tape():
        loss, parts = model.task_loss(task, bundles)
        tz.backprop(loss)
    assert np.isfinite(loss.data)
    assert float(loss.data) > 0
    assert "tokens" in parts
    if task == Task.AVS:
        assert "mask" in parts
    if task == Task.SSL:
        assert "heatmap" in parts


def test_mixed_batch_rejected(model):
    mixed = batch_for(Task.AVE, 1) + batch_for(Task.SSL, 1)
    with pytest.raises(ContractError, match="homogeneous"):
        model.task_loss(Task.AVE, mixed)


def test_mask_decoder_grads_are_zero_off_task(model):
    model.zero_grads()
    bundles = batch_for(Task.AVQA, 3)
    with Tape():
        loss, _ = model.task_loss(Task.AVQA, bundles)
        tz.backprop(loss)
    for name, p in model.mask_decoder.params().items():
        assert np.all(p.grad == 0), name
    # while the shared trunk moves
    assert np.any(model.w_audio.grad != 0)
    assert np.any(model.decoder.out_proj.grad != 0)


def test_mask_decoder_grads_are_nonzero_on_task(model):
    model.zero_grads()
    bundles = batch_for(Task.AVS, 2)
    with Tape():
        loss, _ = model.task_loss(Task.AVS, bundles)
        tz.backprop(loss)
    head_w = model.mask_decoder.params()["maskdec.head.w"]
    assert np.any(head_w.grad != 0)


def test_prompt_params_get_grads_when_enabled(model):
    model.zero_grads()
    bundles = batch_for(Task.AVQA, 2)
    with Tape():
        loss, _ = model.task_loss(Task.AVQA, bundles)
        tz.backprop(loss)
    for name, p in model.prompt.params().items():
        assert np.any(p.grad != 0), name


@pytest.mark.parametrize("task", list(Task))
def test_predict_structure(model, task):
    b = batch_for(task, 1, seed0=33)[0]
    out = model.predict(b)
    assert out["task"] == task
    if task == Task.AVE:
        assert out["events"].shape == (CFG.n_segments,)
    elif task == Task.AVVP:
        assert out["audible"].shape == (CFG.n_segments, CFG.n_classes)
    elif task == Task.SSL:
        assert out["bins"].shape == (CFG.n_segments,)
        assert out["heatmap"].shape == (CFG.n_segments, CFG.n_patches)
        np.testing.assert_allclose(out["heatmap"].sum(axis=1), 1.0, atol=1e-9)
        assert out["regions"].shape == (CFG.n_segments, CFG.mask_hw,
                                        CFG.mask_hw)
    elif task == Task.AVS:
        assert out["masks"].shape == (CFG.n_segments, CFG.mask_hw, CFG.mask_hw)
        assert set(np.unique(out["masks"])) <= {0, 1}
    else:
        assert 0 <= out["answer"] < CFG.n_answers


def test_token_payload_mapping():
    b = batch_for(Task.AVVP, 1)[0]
    audible, visible = token_payload(Task.AVVP, b.labels)
    np.testing.assert_array_equal(audible, b.labels["audible"])
    b2 = batch_for(Task.AVQA, 1)[0]
    assert token_payload(Task.AVQA, b2.labels) == {"answer": b2.labels["answer"]}


def test_forward_is_deterministic(model):
    bundles = batch_for(Task.SSL, 2)
    c1 = model.encode_bundles(bundles)
    c2 = model.encode_bundles(bundles)
    np.testing.assert_array_equal(c1["unified"].data, c2["unified"].data)
