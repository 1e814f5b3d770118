import io

import numpy as np
import pytest

from avlit import numerics as nx
from avlit.afrcnn import ConfigError
from avlit.model import (
    AVLIT,
    FUSION_PRESETS,
    CheckpointError,
    ModelConfig,
    VideoEncoder,
    checkpoint_bytes,
    load_model,
    pretrain_video_encoder,
    read_checkpoint,
    save_model,
    separate,
)
from avlit.numerics import Tensor

from gradcheck import check_parameter_gradients

MICRO = ModelConfig(
    n_audio=2, n_video=1, fusion=(0,), enc_channels=16, enc_kernel=16, enc_stride=8,
    audio_channels=16, audio_bottleneck=8, audio_stages=2, video_channels=8, video_bottleneck=8,
    video_stages=2, sample_rate=1000,
)  # fmt: skip
T_MICRO = 200  # 0.2 s -> 5 frames, latent length 24


def _inputs(cfg, T, n=1, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 1, T)).astype(nx.get_dtype())
    frames = rng.random((n, cfg.n_speakers, cfg.n_frames(T), 64, 64)).astype(nx.get_dtype())
    return x, frames


def test_latent_length_of_default_config():
    assert ModelConfig().latent_length(32000) == 1599
    assert ModelConfig().n_frames(32000) == 50


def test_video_encoder_has_4752_frozen_params():
    enc = VideoEncoder(np.random.default_rng(0))
    assert enc.num_parameters() == 4752
    assert enc.trainable_parameters() == []
    model = AVLIT(MICRO)
    assert all(not p.requires_grad for p in model.video_encoder.parameters())
    assert len(model.trainable_parameters()) == len(model.parameters()) - 4


@pytest.mark.parametrize("T", [200, 217, 333])
def test_forward_shapes(T):
    model = AVLIT(MICRO)
    x, frames = _inputs(MICRO, T, n=2)
    out = model.forward(x, frames)
    assert out.shape == (2, 2, T)
    assert model.forward(x[:, 0]).shape == (2, 2, T)


def test_encode_video_shape():
    model = AVLIT(MICRO)
    _, frames = _inputs(MICRO, T_MICRO, n=3)
    emb = model.encode_video(frames)
    assert emb.shape == (3, 2, 1024, 5)
    assert model.encode_video(frames[0]).shape == (1, 2, 1024, 5)


def test_separate_matches_forward_and_functional_form():
    model = AVLIT(MICRO, seed=4)
    x, frames = _inputs(MICRO, T_MICRO)
    est = model.separate(x[0, 0], frames[0])
    assert est.shape == (2, T_MICRO)
    np.testing.assert_array_equal(est, model.forward(x, frames).data[0])
    np.testing.assert_array_equal(separate(x[0, 0], frames[0], MICRO, model.state_dict()), est)


def test_mask_is_nonnegative_and_output_is_finite():
    model = AVLIT(MICRO)
    x, frames = _inputs(MICRO, T_MICRO)
    f_a = model.encode_audio(Tensor(x))
    mask = nx.relu(model.audio_branch(f_a, None))
    assert (mask.data >= 0).all()
    assert np.isfinite(model.forward(x, frames).data).all()


def _eq2_reference(model, x):
    # iterations without any video: R(0) = block(f_A), R(i) = block(R(i-1) + f_A)
    f_a = model.encode_audio(Tensor(x))
    r = model.audio_block(f_a)
    for _ in range(1, model.config.n_audio):
        r = model.audio_block(r + f_a)
    out = nx.conv_transpose1d(f_a * nx.relu(r), model.dec_weight, model.dec_bias, stride=model.config.enc_stride)
    return nx.fit_length(out, x.shape[-1]).data


def test_empty_fusion_equals_audio_only_iteration():
    cfg = MICRO.replace(n_audio=3, fusion=())
    model = AVLIT(cfg, seed=1)
    x, frames = _inputs(cfg, T_MICRO)
    with_video = model.forward(x, frames).data
    np.testing.assert_array_equal(with_video, model.forward(x).data)
    np.testing.assert_array_equal(with_video, _eq2_reference(model, x))


def test_zero_video_features_make_fusion_schedules_identical():
    x, frames = _inputs(MICRO, T_MICRO)
    outs = []
    for fusion in [(), (0,), (1,), (2,), (0, 1, 2, 3)]:
        model = AVLIT(MICRO.replace(n_audio=4, n_video=2, fusion=fusion), seed=2)
        model.video_out_weight.data[:] = 0
        model.video_out_bias.data[:] = 0
        outs.append(model.forward(x, frames).data)
    for o in outs[1:]:
        np.testing.assert_array_equal(o, outs[0])


def test_fusion_changes_output_when_video_present():
    x, frames = _inputs(MICRO, T_MICRO)
    a = AVLIT(MICRO.replace(fusion=(0,)), seed=2).forward(x, frames).data
    b = AVLIT(MICRO.replace(fusion=()), seed=2).forward(x, frames).data
    assert not np.array_equal(a, b)


def test_fusion_presets():
    assert FUSION_PRESETS["early"](4) == (0,)
    assert FUSION_PRESETS["middle"](4) == (2,)
    assert FUSION_PRESETS["late"](4) == (3,)
    assert FUSION_PRESETS["all"](4) == (0, 1, 2, 3)


def test_presets():
    assert [(c.n_audio, c.n_video, c.fusion) for c in map(ModelConfig.preset, ("avlit-2", "avlit-4", "avlit-8"))] == [
        (2, 1, (0,)),
        (4, 2, (0,)),
        (8, 4, (0,)),
    ]
    with pytest.raises(ConfigError):
        ModelConfig.preset("avlit-3")


def test_no_video_iterations():
    cfg = MICRO.replace(n_video=0)
    model = AVLIT(cfg)
    x, frames = _inputs(cfg, T_MICRO)
    assert model.forward(x, frames).shape == (1, 2, T_MICRO)


def test_parameter_count_independent_of_iterations():
    counts = {AVLIT(MICRO.replace(n_audio=n, n_video=n // 2, fusion=(0,))).num_parameters() for n in (1, 2, 5, 8)}
    assert len(counts) == 1


def test_end_to_end_gradcheck_float64():
    with nx.precision("float64"):
        model = AVLIT(MICRO, seed=3)
        x, frames = _inputs(MICRO, T_MICRO, seed=5)
        emb = model.encode_video(frames)
        refs = np.random.default_rng(6).standard_normal((1, 2, T_MICRO))

        def loss():
            est = model.forward(x, emb, embedded=True)
            diff = est - Tensor(refs)
            return (diff * diff).mean()

        err = check_parameter_gradients(model.trainable_parameters(), loss, per_tensor=5)
    assert err < 1e-4


def test_duration_mismatch_rejected():
    model = AVLIT(MICRO)
    x, _ = _inputs(MICRO, T_MICRO)
    _, long_frames = _inputs(MICRO, 500)
    with pytest.raises(ValueError, match="frames"):
        model.forward(x, long_frames)


def test_wrong_speaker_count_rejected():
    model = AVLIT(MICRO)
    x, frames = _inputs(MICRO.replace(n_speakers=3), T_MICRO)
    with pytest.raises(nx.ShapeError):
        model.forward(x, frames)


def test_too_short_waveform_rejected():
    with pytest.raises(ConfigError):
        AVLIT(MICRO).forward(np.zeros((1, 1, 10), dtype=np.float32))


@pytest.mark.parametrize(
    "changes", [dict(fusion=(4,)), dict(n_audio=0), dict(n_video=-1), dict(frame_size=32), dict(n_speakers=0)]
)
def test_invalid_model_configs(changes):
    with pytest.raises(ConfigError):
        MICRO.replace(**changes)


def test_config_text_round_trip():
    cfg = MICRO.replace(fusion=(0, 1), fps=29.97)
    assert ModelConfig.from_text(cfg.to_text()) == cfg


def test_checkpoint_round_trip(tmp_path):
    model = AVLIT(MICRO, seed=8)
    path = tmp_path / "m.avlt"
    save_model(model, path, extra="epoch=3\n")
    blob = path.read_bytes()
    assert blob[:4] == b"AVLT"
    loaded = load_model(path)
    assert loaded.config == MICRO
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(loaded.state_dict()[k], v)
    assert checkpoint_bytes(loaded, extra="epoch=3\n") == blob
    x, frames = _inputs(MICRO, T_MICRO)
    np.testing.assert_array_equal(loaded.forward(x, frames).data, model.forward(x, frames).data)
    cfg, _, extra = read_checkpoint(io.BytesIO(blob))
    assert extra == "epoch=3\n"


def test_checkpoint_errors(tmp_path):
    blob = checkpoint_bytes(AVLIT(MICRO))
    with pytest.raises(CheckpointError):
        read_checkpoint(io.BytesIO(b"XXXX" + blob[4:]))
    with pytest.raises(CheckpointError):
        read_checkpoint(io.BytesIO(blob[:-7]))
    other = AVLIT(MICRO.replace(audio_channels=24))
    with pytest.raises((KeyError, ValueError)):
        other.load_state_dict(AVLIT(MICRO).state_dict())


def test_pretraining_reduces_reconstruction_error():
    model = AVLIT(MICRO)
    _, frames = _inputs(MICRO, T_MICRO, n=4)
    before = model.video_encoder.state_dict()
    losses = pretrain_video_encoder(model, frames.reshape(-1, 64, 64), steps=40, batch=8, lr=3e-3)
    assert losses[-1] < losses[0]
    assert model.video_encoder.trainable_parameters() == []
    assert any(not np.array_equal(before[k], v) for k, v in model.video_encoder.state_dict().items())
