import numpy as np
import pytest
import torch
import torch.nn as nn

from modalign.config import AblationFlags
from modalign.exceptions import InvalidInput, UnknownModality
from modalign.fusion.model import FusionClassifier, csa_forward
from modalign.objectives import (
    ScheduleState,
    bce_loss,
    kl_alignment,
    total_loss,
)
from modalign.pretrain.trainer import text_encoder_for
from modalign.utils import parameter_gradient_error
from modalign.vision.experts import VisionExpert
from modalign.volumes.mvol import VolumeRecord


def classifier(tiny_model, **flags) -> FusionClassifier:
    torch.manual_seed(0)
    return FusionClassifier(
        ["T1", "T2"],
        3,
        tiny_model,
        AblationFlags.from_mapping(flags),
        text_dim=tiny_model.text_dim,
    )


def test_full_model_forward(tiny_model):
    model = classifier(tiny_model)
    volumes = torch.rand(2, 1, 16, 16, 16)
    out = model(volumes, ["T1", "T2"], torch.randn(2, 16))

    assert out.f_v.shape == (2, 8, 2, 2, 2)
    assert out.f_trans.shape == out.f_v.shape
    assert out.f_vt.shape == out.f_v.shape
    assert out.f_text.shape == (2, 16)
    assert out.f_fusion.shape == (2, 16)
    assert out.logits.shape == (2, 3)
    assert torch.equal(out.probabilities, torch.sigmoid(out.logits))


def test_mixed_batch_matches_separate_passes(tiny_model):
    model = classifier(tiny_model)
    volumes = torch.rand(4, 1, 16, 16, 16)
    modalities = ["T2", "T1", "T2", "T1"]
    grids = model.conv_features(volumes, modalities)
    for i, modality in enumerate(modalities):
        alone = model.conv_streams[modality](volumes[i : i + 1])
        assert torch.allclose(grids[i : i + 1], alone, atol=1e-6)


def test_conv_features_errors(tiny_model):
    model = classifier(tiny_model)
    volumes = torch.rand(2, 1, 16, 16, 16)
    with pytest.raises(InvalidInput):
        model.conv_features(volumes, ["T1"])
    with pytest.raises(UnknownModality):
        model.conv_features(volumes, ["T1", "DWI"])


def test_without_cross_attention_the_grid_is_pooled(tiny_model):
    model = classifier(tiny_model, use_cct=False, use_csa=False)
    assert not hasattr(model, "transformer_stream")
    assert not hasattr(model, "projector")

    out = model(torch.rand(2, 1, 16, 16, 16), ["T1", "T1"])
    assert out.f_trans is None
    assert out.f_vt is None
    assert out.f_text is None
    assert torch.equal(out.f_fusion, model.pool(out.f_v))


def test_without_text_modulation_the_stream_is_fused_as_is(tiny_model):
    model = classifier(tiny_model, use_csa=False)
    assert not hasattr(model, "gate")

    out = model(torch.rand(1, 1, 16, 16, 16), ["T2"])
    assert out.f_vt is out.f_trans
    assert out.f_text is None


def test_text_modulation_needs_text(tiny_model):
    model = classifier(tiny_model)
    with pytest.raises(InvalidInput):
        model(torch.rand(1, 1, 16, 16, 16), ["T1"])


def test_flags_and_classes_are_checked(tiny_model):
    with pytest.raises(InvalidInput):
        classifier(tiny_model, use_cct=False, use_csa=True)
    with pytest.raises(InvalidInput):
        FusionClassifier(
            ["T1"], 1, tiny_model, AblationFlags(), tiny_model.text_dim
        )


def test_load_experts(tiny_model):
    model = classifier(tiny_model)
    torch.manual_seed(1)
    t1, t2 = VisionExpert(tiny_model), VisionExpert(tiny_model)
    model.load_experts({"T1": t1.state_dict(), "T2": t2.state_dict()})

    volume = torch.rand(1, 1, 16, 16, 16)
    assert torch.equal(model.conv_streams["T1"](volume), t1.conv(volume))
    assert torch.equal(model.conv_streams["T2"](volume), t2.conv(volume))


def test_load_experts_needs_every_modality(tiny_model):
    model = classifier(tiny_model)
    with pytest.raises(InvalidInput) as x:
        model.load_experts({"T1": VisionExpert(tiny_model).state_dict()})
    assert "T2" in str(x.value)


def test_csa_forward(tiny_model):
    model = classifier(tiny_model)
    model.eval()
    encoder = text_encoder_for(tiny_model)
    rng = np.random.default_rng(0)
    record = VolumeRecord(
        id="r0",
        modality="T2",
        voxels=rng.random((12, 16, 20)),
        report="hyperintense lesion in the left frontal lobe",
        labels=(0, 1, 0),
    )
    out = csa_forward(record, model, encoder, 16, max_tokens=32)
    assert out.logits.shape == (1, 3)
    assert out.f_text.shape == (1, 16)
    assert torch.allclose(out.f_text.norm(dim=-1), torch.ones(1))


def test_head_and_gate_gradients(tiny_model):
    model = classifier(tiny_model).double()
    volumes = torch.rand(2, 1, 16, 16, 16, dtype=torch.float64)
    text = torch.randn(2, 16, dtype=torch.float64)
    target = torch.randn(2, 3, dtype=torch.float64)

    def loss():
        return (model(volumes, ["T1", "T2"], text).logits * target).sum()

    assert parameter_gradient_error(loss, model.head.weight) < 1e-5
    assert parameter_gradient_error(loss, model.gate.linear.weight) < 1e-5


def test_training_loss_reaches_the_convolutional_streams(tiny_model):
    model = classifier(tiny_model)
    volumes = torch.rand(2, 1, 16, 16, 16)
    labels = torch.tensor([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    out = model(volumes, ["T1", "T2"], torch.randn(2, 16))

    loss = total_loss(
        bce_loss(out.probabilities, labels),
        kl_alignment(out.f_text, out.f_fusion),
        ScheduleState(t=1, t_max=4),
    )
    loss.backward()

    for modality in ("T1", "T2"):
        convs = [
            m
            for m in model.conv_streams[modality].modules()
            if isinstance(m, nn.Conv3d)
        ]
        for conv in (convs[0], convs[-1]):
            gradient = conv.weight.grad
            assert gradient is not None
            assert torch.isfinite(gradient).all()
            assert gradient.abs().sum() > 0
