import json

import numpy as np
import pytest
import torch

from polybench.cnn import (
    CNNConfig,
    _evaluate,
    _label_tensor,
    backbone_checksum,
    backbone_state,
    build_resnet18,
    cnn_predict,
    finite_difference_check,
    images_to_tensor,
    load_cnn,
    logits_to_labels,
    read_weights,
    save_cnn,
    tiny_subnetwork,
    train,
    write_weights,
)
from polybench.errors import DigestMismatchError, MissingArtifactError, TrainingError
from polybench.phantom_synth import PolypClass

T1, T2, T3, T4 = PolypClass


def subset(corpus, per_class):
    """First ``per_class`` images of each class from a (spec, image) corpus."""
    picked = {c: [] for c in PolypClass}
    for spec, img in corpus:
        if len(picked[spec.polyp_class]) < per_class:
            picked[spec.polyp_class].append(img.pixels)
    images = np.stack([im for c in PolypClass for im in picked[c]])
    labels = [c for c in PolypClass for _ in picked[c]]
    return images, labels


def test_forward_shape_and_stage_schedule():
    model = build_resnet18(regime="scratch", seed=0)
    net = model.net.eval()
    shapes = {}
    hooks = [getattr(net, f"layer{i}").register_forward_hook(
        lambda m, inp, out, i=i: shapes.__setitem__(i, tuple(out.shape))) for i in range(1, 5)]
    with torch.no_grad():
        out = net(torch.zeros(1, 3, 224, 224))
    for h in hooks:
        h.remove()
    assert out.shape == (1, 4)
    assert shapes == {1: (1, 64, 56, 56), 2: (1, 128, 28, 28), 3: (1, 256, 14, 14), 4: (1, 512, 7, 7)}


def test_residual_blocks_match_shortcut_shapes():
    net = build_resnet18(seed=0).net.eval()
    x = torch.randn(1, 64, 56, 56)
    with torch.no_grad():
        for i in range(1, 5):
            for block in getattr(net, f"layer{i}"):
                body = block.bn2(block.conv2(block.relu(block.bn1(block.conv1(x)))))
                short = x if block.downsample is None else block.downsample(x)
                assert body.shape == short.shape
                x = block(x)


def test_scratch_build_is_seeded():
    a = build_resnet18(regime="scratch", seed=7).net.state_dict()
    b = build_resnet18(regime="scratch", seed=7).net.state_dict()
    c = build_resnet18(regime="scratch", seed=8).net.state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not torch.equal(a["conv1.weight"], c["conv1.weight"])


def test_pretrained_build_matches_recorded_checksum(tiny_proxy_weights):
    tensors, meta = read_weights(tiny_proxy_weights)
    assert meta["regime"] == "proxy"
    model = build_resnet18(regime="pretrained", seed=3, weights_path=tiny_proxy_weights)
    assert backbone_checksum(backbone_state(model.net)) == meta["source_checksum"]
    assert model.meta["weights_regime"] == "proxy"
    # head is fresh and seeded, not taken from the file
    again = build_resnet18(regime="pretrained", seed=3, weights_path=tiny_proxy_weights)
    assert torch.equal(model.net.fc.weight, again.net.fc.weight)
    assert tuple(model.input_mean) == tuple(json.loads(meta["input_mean"]))


def test_pretrained_build_errors(tmp_path, tiny_proxy_weights):
    with pytest.raises(MissingArtifactError):
        build_resnet18(regime="pretrained", weights_path=tmp_path / "absent.safetensors")
    with pytest.raises(MissingArtifactError):
        build_resnet18(regime="pretrained", weights_path=None)

    garbage = tmp_path / "garbage.safetensors"
    garbage.write_bytes(b"\x10\x00\x00\x00not a tensor file")
    with pytest.raises(DigestMismatchError):
        build_resnet18(regime="pretrained", weights_path=garbage)

    tensors, meta = read_weights(tiny_proxy_weights)
    tensors["conv1.weight"] = tensors["conv1.weight"] + 1e-3
    tampered = tmp_path / "tampered.safetensors"
    write_weights(tampered, tensors, meta)
    with pytest.raises(DigestMismatchError, match="checksum"):
        build_resnet18(regime="pretrained", weights_path=tampered)

    del tensors["layer4.1.bn2.running_var"]
    partial = tmp_path / "partial.safetensors"
    write_weights(partial, tensors, meta)
    with pytest.raises(DigestMismatchError, match="tensor names"):
        build_resnet18(regime="pretrained", weights_path=partial)


def test_config_validation():
    with pytest.raises(ValueError):
        CNNConfig(learning_rate=0)
    with pytest.raises(ValueError):
        CNNConfig(max_epochs=0)
    with pytest.raises(ValueError):
        CNNConfig(patience=0)
    with pytest.raises(ValueError):
        CNNConfig(regime="frozen")
    cfg = CNNConfig.for_regime("pretrained")
    assert (cfg.learning_rate, cfg.max_epochs, cfg.patience) == (1e-4, 20, 5)
    cfg = CNNConfig.for_regime("scratch")
    assert (cfg.learning_rate, cfg.max_epochs, cfg.patience, cfg.batch_size, cfg.momentum) == (1e-3, 50, 10, 32, 0.9)


def test_gradient_check_tiny_subnetwork():
    net = tiny_subnetwork(seed=0)
    assert sum(p.numel() for p in net.parameters()) <= 50
    g = torch.Generator().manual_seed(0)
    x = torch.randn(1, 3, 8, 8, generator=g, dtype=torch.float64)
    assert finite_difference_check(net, x, torch.tensor([2])) <= 1e-3


def test_overfits_sixteen_samples(easy_corpus):
    images, labels = subset(easy_corpus, 4)
    model = build_resnet18(regime="scratch", seed=0)
    cfg = CNNConfig.for_regime("scratch", max_epochs=50, patience=50, image_size=64, batch_size=16)
    model, hist = train(model, images, labels, images, labels, cfg)
    pred, _ = cnn_predict(model, images)
    assert pred == labels
    assert max(e["train_accuracy"] for e in hist.epochs) == 1.0


def test_plateau_triggers_stop_at_patience_plus_one(easy_corpus):
    images, labels = subset(easy_corpus, 2)
    model = build_resnet18(regime="scratch", seed=0)
    for p in model.net.parameters():
        p.requires_grad_(False)
    for m in model.net.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.momentum = 0.0
    val = np.repeat(images[:1], 4, axis=0)
    cfg = CNNConfig.for_regime("scratch", max_epochs=30, patience=4, image_size=32)
    _, hist = train(model, images, labels, val, [labels[0]] * 4, cfg)
    assert hist.stopped_epoch == cfg.patience + 1
    assert hist.best_epoch == 1
    assert len({e["val_loss"] for e in hist.epochs}) == 1


def test_best_epoch_state_is_restored(easy_corpus):
    images, labels = subset(easy_corpus, 3)
    val_images, val_labels = images[::2], labels[::2]
    cfg = CNNConfig.for_regime("scratch", max_epochs=6, patience=2, image_size=32, seed=1)
    model, hist = train(build_resnet18(seed=1), images, labels, val_images, val_labels, cfg)
    best = min(hist.epochs, key=lambda e: e["val_loss"])
    assert best["epoch"] == hist.best_epoch
    assert hist.stopped_epoch <= cfg.max_epochs
    x = images_to_tensor(val_images, cfg.image_size, model.input_mean, model.input_std)
    loss, _ = _evaluate(model.net, x, _label_tensor(val_labels), cfg.batch_size)
    assert abs(loss - best["val_loss"]) <= 1e-5


def test_training_is_seeded(easy_corpus):
    images, labels = subset(easy_corpus, 2)
    cfg = CNNConfig.for_regime("scratch", max_epochs=2, patience=2, image_size=32, seed=5)
    _, h1 = train(build_resnet18(seed=5), images, labels, images, labels, cfg)
    _, h2 = train(build_resnet18(seed=5), images, labels, images, labels, cfg)
    assert h1.to_dict() == h2.to_dict()


def test_small_lr_loss_is_monotone(easy_corpus):
    images, labels = subset(easy_corpus, 2)
    torch.manual_seed(0)
    net = build_resnet18(seed=0).net.train()
    x = images_to_tensor(images, 64, (0.5, 0.5, 0.5), (0.25, 0.25, 0.25))
    y = _label_tensor(labels)
    opt = torch.optim.SGD(net.parameters(), lr=1e-5, momentum=0.9)
    losses = []
    for _ in range(11):
        loss = torch.nn.functional.cross_entropy(net(x), y)
        losses.append(float(loss.detach()))
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert all(b - a <= 1e-6 for a, b in zip(losses, losses[1:]))


def test_pretrained_history_capped_at_twenty(easy_corpus, tiny_proxy_weights):
    images, labels = subset(easy_corpus, 2)
    model = build_resnet18(regime="pretrained", seed=0, weights_path=tiny_proxy_weights)
    cfg = CNNConfig.for_regime("pretrained", image_size=32)
    _, hist = train(model, images, labels, images[::2], labels[::2], cfg)
    assert len(hist.epochs) <= 20 and hist.stopped_epoch <= 20


def test_train_errors(easy_corpus):
    images, labels = subset(easy_corpus, 2)
    cfg = CNNConfig.for_regime("scratch", max_epochs=2, image_size=32)
    with pytest.raises(ValueError):
        train(build_resnet18(), images[:0], [], images, labels, cfg)
    with pytest.raises(ValueError):
        train(build_resnet18(), images, labels, images[:0], [], cfg)
    cfg = CNNConfig.for_regime("scratch", learning_rate=1e38, max_epochs=3, image_size=32, batch_size=2)
    with pytest.raises(TrainingError, match="epoch"):
        train(build_resnet18(), images, labels, images, labels, cfg)


def test_argmax_and_empty_batch():
    assert logits_to_labels([[0.1, 2.3, -1.0, 0.0]]) == [T2]
    model = build_resnet18(seed=0)
    labels, logits = cnn_predict(model, np.zeros((0, 224, 224, 3), dtype=np.uint8))
    assert labels == [] and logits.shape == (0, 4)


def test_eval_passes_are_identical(easy_corpus):
    images, _ = subset(easy_corpus, 1)
    model = build_resnet18(seed=0)
    _, a = cnn_predict(model, images)
    _, b = cnn_predict(model, images)
    assert np.array_equal(a, b)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        cnn_predict(build_resnet18(seed=0), np.zeros((2, 224, 224), dtype=np.uint8))


def test_save_load_round_trip(tmp_path, easy_corpus):
    images, labels = subset(easy_corpus, 1)
    cfg = CNNConfig.for_regime("scratch", max_epochs=1, image_size=48)
    model, _ = train(build_resnet18(seed=2), images, labels, images, labels, cfg)
    save_cnn(model, tmp_path / "m.safetensors")
    loaded = load_cnn(tmp_path / "m.safetensors")
    assert loaded.image_size == 48 and loaded.input_mean == model.input_mean
    assert np.array_equal(cnn_predict(model, images)[1], cnn_predict(loaded, images)[1])
