import hashlib

import numpy as np
import pytest
import torch

from ilora.backbones import StyleBackbone, UNetBackbone, VQBackbone
from ilora.dataset import Dataset, generate_dataset
from ilora.distances import TrainConfig
from ilora.intrinsics import IntrinsicKind
from ilora.lora import inject
from ilora.training import (
    BaselineKind,
    ProbeHead,
    _attention_features,
    full_finetune,
    probe_predict,
    train_linear_probe,
    train_lora_dense,
    train_lora_generative,
)


@pytest.fixture(scope="module")
def ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("train_ds") / "d"
    generate_dataset(15, seed=3, resolution=32, out_dir=root)
    return Dataset(root)


def tiny_unet(seed=0):
    return UNetBackbone(resolution=32, base_channels=8, cond_dim=16, init_seed=seed)


def weights_digest(module):
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().numpy().tobytes())
    return h.hexdigest()


def cfg(**kw):
    base = dict(kind=IntrinsicKind.NORMAL, budget=10, batch_size=2, max_steps=20, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_lora_dense_moves_only_adapters(ds):
    bb = tiny_unet()
    before = weights_digest(bb)
    aset = inject(bb, "all_attn", 2, 0, IntrinsicKind.NORMAL)
    adapters_before = aset.state_bytes()
    aset, log = train_lora_dense(bb, aset, ds, cfg())
    assert weights_digest(bb) == before  # base weights untouched
    assert aset.state_bytes() != adapters_before
    assert np.isfinite(log.final_loss)
    assert log.records[0]["step"] == 1


def test_lora_dense_deterministic(ds):
    outs = []
    for _ in range(2):
        bb = tiny_unet()
        aset = inject(bb, "all_attn", 2, 0, IntrinsicKind.NORMAL)
        aset, _ = train_lora_dense(bb, aset, ds, cfg())
        outs.append(aset.state_bytes())
    assert outs[0] == outs[1]
    bb = tiny_unet()
    aset = inject(bb, "all_attn", 2, 0, IntrinsicKind.NORMAL)
    aset, _ = train_lora_dense(bb, aset, ds, cfg(seed=1))
    assert aset.state_bytes() != outs[0]


def test_full_finetune_leaves_original_untouched(ds):
    bb = tiny_unet()
    before = weights_digest(bb)
    tuned, log = full_finetune(bb, ds, cfg(learning_rate=1e-3))
    assert weights_digest(bb) == before
    assert weights_digest(tuned) != before
    assert np.isfinite(log.final_loss)


def test_linear_probe_trains_head_only(ds):
    bb = tiny_unet()
    before = weights_digest(bb)
    head, log = train_linear_probe(bb, ds, cfg(learning_rate=1e-3))
    assert weights_digest(bb) == before
    assert isinstance(head, ProbeHead)
    assert head.n_params > 0
    x = torch.randn(2, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    pred = probe_predict(bb, head, x, IntrinsicKind.NORMAL)
    assert pred.shape == (2, 3, 32, 32)


def test_attention_features_cover_all_blocks():
    bb = tiny_unet()
    x = torch.randn(1, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    feats = _attention_features(bb, x, 1)
    assert len(feats) == 6  # one self + one cross block in down/mid/up
    for f in feats.values():
        assert f.dim() == 4 and f.shape[0] == 1


class _ConstantOracle:
    def __init__(self, kind):
        self.kind = kind

    def predict_encoded(self, rgb):
        return torch.zeros_like(rgb)


def test_lora_generative_gan_loop_runs():
    bb = StyleBackbone(resolution=32, z_dim=16, w_dim=16, base_channels=16, init_seed=0)
    base = weights_digest(bb)
    aset = inject(bb, "gan_affine", 2, 0, IntrinsicKind.NORMAL)
    oracle = _ConstantOracle(IntrinsicKind.NORMAL)
    aset, log = train_lora_generative(bb, aset, oracle, cfg(max_steps=10))
    assert weights_digest(bb) == base
    assert np.isfinite(log.final_loss)


def test_lora_generative_vq_requires_dataset(ds):
    bb = VQBackbone(resolution=32, channels=16, codebook_size=32, code_dim=8, init_seed=0)
    aset = inject(bb, "vq_decoder_attn", 2, 0, IntrinsicKind.DEPTH)
    oracle = _ConstantOracle(IntrinsicKind.DEPTH)
    with pytest.raises(ValueError):
        train_lora_generative(bb, aset, oracle, cfg(kind=IntrinsicKind.DEPTH, max_steps=5))
    aset, log = train_lora_generative(
        bb, aset, oracle, cfg(kind=IntrinsicKind.DEPTH, max_steps=5), dataset=ds
    )
    assert np.isfinite(log.final_loss)


def test_lora_generative_kind_mismatch_rejected():
    bb = StyleBackbone(resolution=32, z_dim=16, w_dim=16, base_channels=16, init_seed=0)
    aset = inject(bb, "gan_affine", 2, 0, IntrinsicKind.NORMAL)
    with pytest.raises(ValueError):
        train_lora_generative(bb, aset, _ConstantOracle(IntrinsicKind.DEPTH), cfg())


def test_baseline_kind_enum():
    assert {b.value for b in BaselineKind} == {"lora", "linear_probe", "full_finetune"}
