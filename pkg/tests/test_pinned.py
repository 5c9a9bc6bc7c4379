"""Pinned-seed behaviour of the training module (thresholds frozen from
the recorded runs)."""
from dataclasses import replace

import pytest

from lopa import training as T
from lopa.fm import ToyTransformer

BASE = T.TrainConfig()
FM = ToyTransformer(BASE.fm_config())


def test_parity_task_with_gate_lopa():
    cfg = replace(BASE, method="lopa", task="parity-of-marked-byte", seed=7)
    first = T.run(cfg, FM)
    assert first.train_acc >= 0.95
    assert T.run(cfg, FM) == first


def test_task_signal_is_learnable_by_prompt_tuning():
    rep = T.run(replace(BASE, method="pt", task="task-signal", seed=0), FM)
    assert rep.train_acc >= 0.95


def test_rank_sweep_shape():
    reps = T.ablate(replace(BASE, method="lopa", task="instance-signal"), rs=[1, 2, 4], seeds=[0, 1, 2, 3, 4])
    shape = T.rank_sweep_shape(reps)
    assert shape["ok"], shape
