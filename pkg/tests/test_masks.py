"""Selection-mask behavior across blocks, and what soft-gating training does
to where the selections land."""

import numpy as np

from sparsemodal.config import ModelConfig
from sparsemodal.model import DataSpec, Network, run_training
from sparsemodal.signal import build_samples, class_region, make_records
from sparsemodal.signal import Manifest, pos_weights_from_labels


def manifest_with_splits(n_train, n_valid, n_test, seed):
    records = make_records(n_train + n_valid + n_test, seed=seed)
    order = np.random.default_rng(seed).permutation(len(records))
    for rank, idx in enumerate(order):
        records[idx].split = ("train" if rank < n_train else
                              "valid" if rank < n_train + n_valid else "test")
    labels = np.array([r.labels for r in records if r.split == "train"],
                      dtype=float)
    return Manifest(records, pos_weights_from_labels(labels))


def pooled_any(mask):
    """(S, H, W) -> (S, ceil(H/2), ceil(W/2)): window is active if any site is."""
    s, h, w = mask.shape
    hp, wp = (h + 1) // 2 * 2, (w + 1) // 2 * 2
    padded = np.zeros((s, hp, wp), dtype=bool)
    padded[:, :h, :w] = mask
    return padded.reshape(s, hp // 2, 2, wp // 2, 2).any(axis=(2, 4))


class TestMaskNesting:
    def test_later_blocks_select_within_pooled_survivors(self):
        manifest = manifest_with_splits(12, 0, 0, seed=0)
        samples = build_samples(manifest.split("train"))[:4]
        cfg = ModelConfig(mode="MESM", top_p=0.6, classes=6, seed=0)
        net = Network(cfg, DataSpec.from_samples(samples))
        out = net.forward(samples, collect_traces=True)
        by_mod = {}
        for tr in out.traces:
            by_mod.setdefault(tr.modality, {})[tr.block] = tr.mask
        for masks in by_mod.values():
            for block in range(1, max(masks)):
                survivors = pooled_any(masks[block])
                assert not np.any(masks[block + 1] & ~survivors)

    def test_full_selection_masks_are_all_ones(self):
        manifest = manifest_with_splits(12, 0, 0, seed=1)
        samples = build_samples(manifest.split("train"))[:2]
        cfg = ModelConfig(mode="MESM", top_p=1.0, classes=6, seed=1)
        net = Network(cfg, DataSpec.from_samples(samples))
        out = net.forward(samples, collect_traces=True)
        assert out.traces
        for tr in out.traces:
            assert tr.mask.all()


class TestTrainedAttention:
    def test_soft_gating_concentrates_selection_on_planted_region(self):
        """After soft-mode training, block-1 visual selections are enriched
        inside the class region well beyond its area fraction."""
        manifest = manifest_with_splits(210, 30, 40, seed=3)
        train = build_samples(manifest.split("train"))
        valid = build_samples(manifest.split("valid"))
        cfg = ModelConfig(mode="MESM", top_p=0.5, mask_mode="soft",
                          learning_rate=1e-3, epochs=6, batch_size=8, seed=3)
        net = Network(cfg, DataSpec.from_samples(train))
        run_training(net, train, valid, manifest.pos_weights)
        test_records = manifest.split("test")
        samples = build_samples(test_records)
        inside, area = [], []
        for record, sample in zip(test_records, samples):
            out = net.forward([sample], collect_traces=True)
            h_lo, h_hi, w_lo, w_hi = class_region(record.class_id)
            box = np.zeros((16, 16), dtype=bool)
            box[h_lo:h_hi, w_lo:w_hi] = True
            for tr in out.traces:
                if tr.modality == "visual" and tr.block == 1:
                    inside.append(tr.mask[:, box].sum() / tr.mask.sum())
                    area.append(box.mean())
        assert np.mean(inside) > 1.25 * np.mean(area)
