import json

import pytest
import torch

from colopath.model import (
    CheckpointError,
    ConfigHashMismatch,
    PretrainedWeightsUnavailable,
    build_model,
    forward,
    load_checkpoint,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def resnet9():
    return build_model(9, pretrained=False, seed=0).eval()


def test_resnet_head_shape(resnet9):
    x = torch.randn(4, 3, 224, 224)
    with torch.no_grad():
        out = forward(resnet9, x)
    assert out.shape == (4, 9)
    assert torch.isfinite(out).all()
    assert resnet9.net.fc.out_features == 9
    assert resnet9.last_conv_layer_id == "layer4"


def test_all_parameters_trainable(resnet9):
    assert all(p.requires_grad for p in resnet9.net.parameters())


def test_num_classes_too_small():
    with pytest.raises(ValueError):
        build_model(1, pretrained=False)


def test_wrong_spatial_size(resnet9):
    with pytest.raises(ValueError, match="224"):
        forward(resnet9, torch.zeros(1, 3, 112, 112))


def test_seeded_initialization_is_reproducible():
    a = build_model(2, pretrained=False, architecture="tiny", seed=5)
    b = build_model(2, pretrained=False, architecture="tiny", seed=5)
    c = build_model(2, pretrained=False, architecture="tiny", seed=6)
    sa, sb, sc = a.net.state_dict(), b.net.state_dict(), c.net.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not torch.equal(sa["fc.weight"], sc["fc.weight"])


def test_head_init_is_uniform_fan_in():
    m = build_model(3, pretrained=False, architecture="tiny", seed=0)
    bound = 1 / m.net.fc.in_features ** 0.5
    assert m.net.fc.weight.abs().max() <= bound


def test_pretrained_offline_error(monkeypatch):
    from torchvision import models

    def offline(*a, **k):
        raise OSError("network unreachable")

    monkeypatch.setattr(models, "resnet50", offline)
    with pytest.raises(PretrainedWeightsUnavailable, match="checkpoints"):
        build_model(2, pretrained=True)


@pytest.fixture
def cached_weights(tmp_path, monkeypatch):
    """Stand-in weights at the cache path torchvision looks up, so no download happens."""
    from torchvision.models import ResNet50_Weights, resnet50

    ckpt_dir = tmp_path / "hub" / "checkpoints"
    ckpt_dir.mkdir(parents=True)
    torch.manual_seed(123)
    url = ResNet50_Weights.IMAGENET1K_V1.url
    torch.save(resnet50(weights=None).state_dict(), ckpt_dir / url.rsplit("/", 1)[1])
    monkeypatch.setenv("TORCH_HOME", str(tmp_path))
    return ckpt_dir


def test_pretrained_body_identical_across_builds(cached_weights):
    a = build_model(2, pretrained=True, seed=1)
    b = build_model(2, pretrained=True, seed=2)
    sa, sb = a.net.state_dict(), b.net.state_dict()
    body = [k for k in sa if not k.startswith("fc.")]
    assert all(torch.equal(sa[k], sb[k]) for k in body)
    assert not torch.equal(sa["fc.weight"], sb["fc.weight"])
    assert a.pretrained and a.net.fc.out_features == 2


def test_tiny_eval_determinism_and_permutation():
    m = build_model(4, pretrained=False, architecture="tiny", seed=3, input_side=64).eval()
    x = torch.randn(6, 3, 64, 64)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    with torch.no_grad():
        a = forward(m, x)
        b = forward(m, x)
        c = forward(m, x[perm])
    assert torch.equal(a, b)
    torch.testing.assert_close(c, a[perm], rtol=0, atol=1e-6)
    same = x[:1].repeat(3, 1, 1, 1)
    with torch.no_grad():
        rows = forward(m, same)
    assert torch.equal(rows[0], rows[1]) and torch.equal(rows[1], rows[2])


class TestCheckpoint:
    def make(self):
        m = build_model(3, pretrained=False, architecture="tiny", seed=7, input_side=32)
        # perturb BN running stats so round-trip covers buffers too
        m.train()
        with torch.no_grad():
            m.net(torch.randn(8, 3, 32, 32))
        return m.eval()

    def test_round_trip_bit_identical(self, tmp_path):
        m = self.make()
        meta = {"epoch": 3, "val_loss": 0.5, "val_accuracy": 0.9, "seed": 7, "config_hash": "abc",
                "stats_ref": "stats.json"}
        path = save_checkpoint(m, meta, tmp_path / "checkpoints" / "best.pt")
        assert (tmp_path / "checkpoints" / "best.meta.json").is_file()
        loaded, loaded_meta = load_checkpoint(path, "abc")
        x = torch.randn(5, 3, 32, 32)
        with torch.no_grad():
            assert (forward(m, x) - forward(loaded, x)).abs().max().item() == 0
        assert loaded_meta["epoch"] == 3 and loaded_meta["model"]["architecture"] == "tiny"
        assert loaded.warnings == []

    def test_tampered_hash_warns(self, tmp_path):
        path = save_checkpoint(self.make(), {"config_hash": "abc"}, tmp_path / "best.pt")
        sidecar = tmp_path / "best.meta.json"
        meta = json.loads(sidecar.read_text())
        meta["config_hash"] = "tampered"
        sidecar.write_text(json.dumps(meta))
        with pytest.warns(ConfigHashMismatch):
            loaded, _ = load_checkpoint(path, "abc")
        assert len(loaded.warnings) == 1 and "tampered" in loaded.warnings[0]

    def test_missing_sidecar(self, tmp_path):
        path = save_checkpoint(self.make(), {}, tmp_path / "best.pt")
        (tmp_path / "best.meta.json").unlink()
        with pytest.raises(CheckpointError, match="checkpoint metadata absent"):
            load_checkpoint(path)

    def test_corrupted_blob(self, tmp_path):
        path = save_checkpoint(self.make(), {}, tmp_path / "best.pt")
        path.write_bytes(b"\x00garbage")
        with pytest.raises(CheckpointError, match="corrupted"):
            load_checkpoint(path)
