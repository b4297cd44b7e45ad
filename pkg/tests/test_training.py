import json
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from iprnet.episodes import EpisodeSampler, SplitSpec, generate_shapes_dataset
from iprnet.exceptions import ConfigurationError, DomainError
from iprnet.losses import LossWeights
from iprnet.model import ModelConfig, parameter_checksum
from iprnet.training import (
    TrainConfig,
    assert_train_episode,
    build_model,
    load_checkpoint,
    make_optimizer,
    poly_lr,
    read_log,
    train,
    train_step,
    write_config,
)

LOG_FIELDS = {"iter", "lr", "L_r", "L_m", "L_1", "L_0", "L_f", "L_p", "total"}
SMALL_MODEL = ModelConfig(proj_channels=16, hidden=8, head_hidden=8)


@pytest.fixture(scope="module")
def dataset():
    return generate_shapes_dataset(n_classes=8, images_per_class=10, image_size=32, seed=2)


def _config(**kw):
    base = dict(max_iters=6, batch_size=2, k_shots=2, model=SMALL_MODEL,
                data=dict(n_classes=8, images_per_class=10, image_size=32, seed=2))
    base.update(kw)
    return TrainConfig(**base)


def _batch(dataset, n=2, k=2, seed=0):
    return EpisodeSampler(dataset, {1, 2, 3, 4, 5, 6}, k, seed=seed, hidden_classes=(7, 8)).sample_batch(n)


@pytest.mark.oracle
def test_poly_lr_examples():
    assert poly_lr(0.05, 0, 100, 0.9) == 0.05
    assert poly_lr(0.05, 100, 100, 0.9) == 0.0
    assert poly_lr(0.05, 50, 100, 0.9) == pytest.approx(0.05 * 0.5 ** 0.9)
    assert poly_lr(0.05, 50, 100, 0.9) == pytest.approx(0.02679, abs=1e-5)
    with pytest.raises(DomainError):
        poly_lr(0.05, 101, 100)
    with pytest.raises(DomainError):
        poly_lr(0.05, -1, 100)


@given(max_iters=st.integers(1, 5000), power=st.floats(0.1, 3.0), base=st.floats(1e-4, 1.0))
def test_poly_lr_nonincreasing(max_iters, power, base):
    lrs = [poly_lr(base, i, max_iters, power) for i in range(0, max_iters + 1, max(1, max_iters // 50))]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


@pytest.mark.parametrize("field, value", [("base_lr", 0.0), ("power", -1.0), ("batch_size", 1)])
def test_config_validation_names_field(field, value):
    with pytest.raises(ConfigurationError) as info:
        TrainConfig(**{field: value})
    assert info.value.field == field


def test_config_file_roundtrip(tmp_path):
    cfg = _config(seed=7, weights=LossWeights(w1=0.5), split=SplitSpec((), 4, 2))
    path = write_config(cfg, tmp_path / "c.yaml")
    back = TrainConfig.from_file(path)
    assert back == cfg
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"learning_rate": 0.1})


def test_train_step_updates_parameters(dataset):
    torch.manual_seed(0)
    model = build_model(_config())
    opt = make_optimizer(model, _config())
    before = parameter_checksum(model.trainable_parameters())
    result = train_step(model, _batch(dataset), LossWeights(), opt)
    assert np.isfinite(result.total)
    assert parameter_checksum(model.trainable_parameters()) != before
    assert result.total == pytest.approx(0.4 * result.L_r + 0.2 * result.L_m + 0.4 * result.L_p, abs=1e-6)
    with pytest.raises(ConfigurationError):
        train_step(model, [], LossWeights(), opt)


@pytest.mark.oracle
def test_relation_only_weights_reach_prototype_path_only(dataset):
    model = build_model(_config())
    opt = make_optimizer(model, _config())
    opt.zero_grad()
    from iprnet.training import compute_losses

    losses = compute_losses(model, _batch(dataset, 4), LossWeights(w1=1.0, w2=0.0, w3=0.0))
    losses["total"].backward()
    assert model.projection[0].weight.grad.abs().sum() > 0
    for module in (model.decoder, model.classifier):
        for p in module.parameters():
            assert p.grad is None or torch.count_nonzero(p.grad) == 0


def test_weight_decay_contracts_parameters(dataset):
    cfg = _config(momentum=0.0, weight_decay=0.01, base_lr=0.1)
    model = build_model(cfg)
    opt = make_optimizer(model, cfg)
    before = [p.detach().clone() for p in model.trainable_parameters()]
    for _ in range(3):
        train_step(model, _batch(dataset), LossWeights(0, 0, 0, 0, 0, 0), opt)
    factor = (1 - 0.1 * 0.01) ** 3
    for b, p in zip(before, model.trainable_parameters()):
        torch.testing.assert_close(p.detach(), b * factor, rtol=1e-6, atol=1e-7)


def test_zero_iterations_checkpoint_is_initialisation(tmp_path, dataset):
    cfg = _config(max_iters=0)
    ckpt = train(cfg, tmp_path, dataset=dataset)
    model, payload = load_checkpoint(ckpt)
    assert parameter_checksum(model) == parameter_checksum(build_model(cfg))
    assert payload["iteration"] == 0
    assert read_log(tmp_path / "train_log.jsonl") == []


def test_training_is_deterministic(tmp_path, dataset):
    a = train(_config(), tmp_path / "a", dataset=dataset)
    b = train(_config(), tmp_path / "b", dataset=dataset)
    assert read_log(tmp_path / "a" / "train_log.jsonl") == read_log(tmp_path / "b" / "train_log.jsonl")
    assert parameter_checksum(load_checkpoint(a)[0]) == parameter_checksum(load_checkpoint(b)[0])


def test_log_and_checkpoint_contents(tmp_path, dataset):
    cfg = _config(max_iters=4, checkpoint_every=2, split=SplitSpec((), 4, 1))
    ckpt = train(cfg, tmp_path, dataset=dataset)
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 4
    records = [json.loads(line) for line in lines]
    assert all(set(r) == LOG_FIELDS for r in records)
    assert [r["iter"] for r in records] == [0, 1, 2, 3]
    assert records[0]["lr"] == cfg.base_lr
    assert (tmp_path / "checkpoint_000002.pt").exists()
    model, payload = load_checkpoint(ckpt)
    assert payload["format_version"] == 1
    assert payload["test_classes"] == [3, 4]
    assert payload["train_config"].split.split_index == 1
    assert payload["optimizer"] is not None


@pytest.mark.protocol
def test_train_episodes_never_carry_test_classes(dataset):
    train_classes, test_classes = {1, 2, 3, 4, 5, 6}, {7, 8}
    sampler = EpisodeSampler(dataset, train_classes, 3, seed=0, hidden_classes=test_classes)
    for ep in sampler.sample_batch(200):
        assert_train_episode(ep, train_classes, test_classes)
    leaky = EpisodeSampler(dataset, train_classes, 3, seed=0)
    with pytest.raises(AssertionError):
        for ep in leaky.sample_batch(200):
            assert_train_episode(ep, train_classes, test_classes)


def test_ablated_variants_train(tmp_path, dataset):
    for iprm, rcm in [(False, True), (True, False), (False, False)]:
        cfg = _config(max_iters=2, model=replace(SMALL_MODEL, iprm=iprm, rcm=rcm))
        train(cfg, tmp_path / f"{iprm}{rcm}", dataset=dataset)
        log = read_log(tmp_path / f"{iprm}{rcm}" / "train_log.jsonl")
        if not iprm:
            assert all(r["L_r"] == 0.0 for r in log)
        if not rcm:
            assert all(r["L_1"] == 0.0 and r["L_p"] == r["L_f"] for r in log)
