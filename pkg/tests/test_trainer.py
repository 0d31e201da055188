import math

import numpy as np
import pytest
import torch
from scipy.stats import chisquare
from torch import nn

from src.config.settings import build_settings
from src.corruption.proposals import add_noise, make_generator
from src.data.dataset import TrainingBatch, batch_from_dataset
from src.data.records import DatasetRecord, DetectionDataset
from src.data.synthetic import generate_synthetic
from src.errors import DatasetError, DomainError, TrainingDivergedError
from src.geometry.boxes import from_signal_space
from src.output.metrics import LOSS_FIELDS, MetricsWriter, read_metrics
from src.schedule.noise_schedule import NoiseSchedule
from src.storage.checkpoints import load_checkpoint
from src.trainer.denoiser import denoise, euler_denoise_step, ground_truth_teacher
from src.trainer.ema import ModelEMA
from src.trainer import trainer as trainer_module
from src.trainer.trainer import ConsistencyTrainer, renew_auxiliary, sample_timesteps, train


class TestEulerStep:
    def test_clean_estimate_equal_to_input(self):
        x_t = torch.randn(5, 4, dtype=torch.float64)
        assert torch.equal(euler_denoise_step(x_t, x_t.clone(), 3.0, 1.0), x_t)

    def test_equal_noise_levels(self):
        x_t = torch.randn(5, 4, dtype=torch.float64)
        assert torch.equal(euler_denoise_step(x_t, torch.zeros_like(x_t), 2.0, 2.0), x_t)

    def test_scalar_example(self):
        out = euler_denoise_step(torch.tensor([5.0]), torch.tensor([0.0]), 10.0, 5.0)
        assert float(out) == 2.5

    def test_step_to_zero_lands_on_estimate(self):
        x_t = torch.randn(5, 4, dtype=torch.float64)
        x_0 = torch.randn(5, 4, dtype=torch.float64)
        assert torch.allclose(euler_denoise_step(x_t, x_0, 7.0, 0.0), x_0, atol=1e-12)

    def test_zero_sigma_rejected(self):
        with pytest.raises(DomainError):
            euler_denoise_step(torch.zeros(1, 4), torch.zeros(1, 4), 0.0, 1.0)

    def test_stays_on_the_noise_trajectory(self):
        schedule = NoiseSchedule()
        rng = np.random.default_rng(0)
        for _ in range(1000):
            r = int(rng.integers(1, schedule.T))
            x_s = torch.tensor(rng.uniform(-1, 1, size=(3, 4)))
            eps = torch.tensor(rng.normal(size=(3, 4)))
            sigma_t, sigma_tm1 = schedule.sigma_at(r), schedule.sigma_at(r - 1)
            x_t = add_noise(x_s, sigma_t, eps)
            stepped = denoise(x_t, sigma_t, sigma_tm1, x_s)
            assert torch.allclose(stepped, add_noise(x_s, sigma_tm1, eps), atol=1e-9, rtol=0)

    def test_ground_truth_teacher_matches_default(self):
        x_s = torch.randn(2, 6, 4)
        x_t = x_s + torch.randn(2, 6, 4)
        sigma_t, sigma_tm1 = torch.tensor([2.0, 3.0]), torch.tensor([4.0, 5.0])
        assert torch.equal(denoise(x_t, sigma_t, sigma_tm1, x_s, teacher=ground_truth_teacher()),
                           denoise(x_t, sigma_t, sigma_tm1, x_s))


class TestModelEMA:
    def make(self, weight):
        layer = nn.Linear(1, 1, bias=False)
        with torch.no_grad():
            layer.weight.fill_(weight)
        return layer

    def test_decay_one_keeps_target(self):
        ema = ModelEMA(self.make(0.0), decay=1.0)
        ema.update(self.make(1.0))
        assert float(ema.module.weight) == 0.0

    def test_decay_zero_copies_online(self):
        ema = ModelEMA(self.make(0.0), decay=0.0)
        ema.update(self.make(1.0))
        assert float(ema.module.weight) == 1.0

    def test_scalar_example(self):
        ema = ModelEMA(self.make(0.0), decay=0.95)
        ema.update(self.make(1.0))
        assert float(ema.module.weight) == pytest.approx(0.05)

    def test_target_is_frozen(self):
        ema = ModelEMA(self.make(0.0), decay=0.5)
        assert not any(p.requires_grad for p in ema.module.parameters())

    def test_invalid_decay(self):
        with pytest.raises(DomainError):
            ModelEMA(self.make(0.0), decay=1.5)


def test_timesteps_are_uniform():
    draws = sample_timesteps(10000, 40, make_generator(0))
    counts = torch.bincount(draws, minlength=40).numpy()
    assert counts[0] == 0
    assert draws.max() <= 39
    assert chisquare(counts[1:]).pvalue > 1e-3


def test_renew_auxiliary_never_touches_gt_rows():
    logits = torch.logit(torch.tensor([[0.1, 0.99, 0.1, 0.99]]))[..., None]
    x_tm1 = torch.full((1, 4, 4), 5.0)
    renewed, replaced = renew_auxiliary(logits, x_tm1, torch.tensor([1]), 0.98, torch.tensor([2.0]),
                                        make_generator(0))
    assert replaced == 1
    assert torch.equal(renewed[0, [0, 1, 3]], x_tm1[0, [0, 1, 3]])
    assert not torch.equal(renewed[0, 2], x_tm1[0, 2])


@pytest.fixture
def batch(tiny_dataset):
    return batch_from_dataset(tiny_dataset, [0, 1])


class TestTrainingIteration:
    def test_record_and_update(self, tiny_settings, batch):
        trainer = ConsistencyTrainer(tiny_settings, num_classes=3)
        before = [p.detach().clone() for p in trainer.model.parameters()]
        record = trainer.training_iteration(batch)

        assert set(LOSS_FIELDS) <= set(record)
        assert record['iteration'] == 0
        assert trainer.state.iteration == 1
        assert math.isfinite(record['total'])
        assert 0.002 <= record['sigma_t'] <= 80.0
        assert any(not torch.equal(b, p) for b, p in zip(before, trainer.model.parameters()))
        assert trainer.metrics.records == [record]

    def test_deterministic_under_seed(self, tiny_settings, batch):
        first = ConsistencyTrainer(tiny_settings, num_classes=3)
        second = ConsistencyTrainer(tiny_settings, num_classes=3)
        for _ in range(2):
            assert first.training_iteration(batch) == second.training_iteration(batch)

    def test_frozen_ema_target_stays_at_init(self, tiny_config, batch):
        settings = build_settings(tiny_config(trainer={'ema_decay': 1.0}))
        trainer = ConsistencyTrainer(settings, num_classes=3)
        initial = {k: v.clone() for k, v in trainer.state.ema.state_dict().items()}
        trainer.training_iteration(batch)
        for key, value in trainer.state.ema.state_dict().items():
            assert torch.equal(value, initial[key])

    def test_ground_truth_teacher_gives_the_same_loss(self, tiny_settings, batch):
        plain = ConsistencyTrainer(tiny_settings, num_classes=3)
        plain_loss = plain.compute_loss(batch)[0].as_dict()
        taught = ConsistencyTrainer(tiny_settings, num_classes=3, teacher=ground_truth_teacher())
        assert taught.compute_loss(batch)[0].as_dict() == plain_loss

    @pytest.mark.parametrize('section', [
        {'ema_target': False},
        {'train_box_renewal': True},
        {'padding_mode': 'jitter'},
        {'n_tr': 1},
    ])
    def test_variants_train(self, tiny_config, batch, section):
        trainer = ConsistencyTrainer(build_settings(tiny_config(trainer=section)), num_classes=3)
        assert math.isfinite(trainer.training_iteration(batch)['total'])

    def test_loss_targets_the_padded_ground_truth(self, tiny_config, monkeypatch):
        trainer = ConsistencyTrainer(build_settings(tiny_config(trainer={'n_tr': 2})), num_classes=3)
        boxes = torch.tensor([[0.2, 0.2, 0.1, 0.1], [0.5, 0.5, 0.1, 0.1], [0.8, 0.8, 0.1, 0.1]])
        labels = torch.tensor([0, 1, 2])
        image = np.full((32, 32, 3), 90, dtype=np.uint8)
        single = TrainingBatch(images=[image], boxes=[boxes], labels=[labels], image_ids=[1])

        padded, targets = [], []
        real_pad, real_loss = trainer_module.pad_ground_truth, trainer_module.consistency_loss

        def recording_pad(*args, **kwargs):
            padded.append(real_pad(*args, **kwargs))
            return padded[-1]

        def recording_loss(out_t, out_tm1, gt_boxes, gt_labels, weights):
            targets.append((gt_boxes, gt_labels))
            return real_loss(out_t, out_tm1, gt_boxes, gt_labels, weights)

        monkeypatch.setattr(trainer_module, 'pad_ground_truth', recording_pad)
        monkeypatch.setattr(trainer_module, 'consistency_loss', recording_loss)
        for _ in range(6):
            trainer.compute_loss(single)

        assert len(padded) == len(targets) == 6
        for proposals, (gt_boxes, gt_labels) in zip(padded, targets):
            assert proposals.num_gt == 2
            assert torch.allclose(from_signal_space(proposals.boxes[:2]), gt_boxes, atol=1e-6)
            assert torch.equal(gt_labels, labels[proposals.gt_index])
        assert any(p.gt_index.tolist() != [0, 1] for p in padded)

    def test_image_without_objects(self, tiny_settings):
        record = DatasetRecord(image_id=1, width=32, height=32, boxes=np.zeros((0, 4)), labels=np.zeros(0),
                               image=np.full((32, 32, 3), 90, dtype=np.uint8))
        empty = DetectionDataset([record], categories=['a', 'b', 'c'])
        trainer = ConsistencyTrainer(tiny_settings, num_classes=3)
        assert math.isfinite(trainer.training_iteration(batch_from_dataset(empty, [0]))['total'])

    def test_empty_batch(self, tiny_settings):
        trainer = ConsistencyTrainer(tiny_settings, num_classes=3)
        with pytest.raises(DatasetError):
            trainer.training_iteration(TrainingBatch([], [], [], []))

    def test_divergence_is_reported(self, tiny_settings, batch):
        metrics = MetricsWriter()
        trainer = ConsistencyTrainer(tiny_settings, num_classes=3, metrics=metrics)
        with torch.no_grad():
            trainer.model.head.stages[-1].class_logits.bias.fill_(float('nan'))
        with pytest.raises(TrainingDivergedError) as info:
            trainer.training_iteration(batch)
        assert info.value.record['iteration'] == 0
        assert metrics.records[-1]['event'] == 'diverged'
        assert trainer.state.iteration == 0


class TestTrainLoop:
    def test_zero_iterations_saves_initialization(self, tiny_config, tiny_dataset, tmp_path):
        settings = build_settings(tiny_config(trainer={'iterations': 0}))
        final = train(tiny_dataset, settings, tmp_path, progress=False)
        blob = load_checkpoint(final)
        fresh = ConsistencyTrainer(settings, num_classes=3).model.state_dict()
        assert blob['iteration'] == 0
        for key, value in fresh.items():
            assert torch.equal(blob['model'][key], value)

    def test_checkpoints_and_metrics(self, tiny_settings, tiny_dataset, tmp_path):
        final = train(tiny_dataset, tiny_settings, tmp_path, progress=False)
        assert final.name == 'checkpoint_final.pt'
        assert (tmp_path / 'checkpoints' / 'checkpoint_0000001.pt').exists()
        assert (tmp_path / 'checkpoints' / 'checkpoint_0000002.pt').exists()
        records = read_metrics(tmp_path / 'metrics.jsonl')
        assert [r['iteration'] for r in records] == [0, 1]

        blob = load_checkpoint(final)
        assert blob['iteration'] == 2
        assert blob['categories'] == tiny_dataset.categories
        assert {'model', 'ema', 'optimizer', 'lr_scheduler', 'generator', 'settings'} <= set(blob)

    def test_empty_dataset(self, tiny_settings, tmp_path):
        with pytest.raises(DatasetError):
            train(DetectionDataset([], categories=['a', 'b', 'c']), tiny_settings, tmp_path, progress=False)


@pytest.mark.slow
def test_loss_decreases_on_toy_data(tiny_config, tmp_path):
    settings = build_settings(tiny_config(trainer={'iterations': 1000, 'batch_size': 4, 'learning_rate': 1e-4,
                                                   'n_tr': 16, 'checkpoint_every': 1000, 'log_every': 100}))
    dataset = generate_synthetic(split_seed=1, count=200, image_size=32, max_objects=3, num_classes=3)
    train(dataset, settings, tmp_path, progress=False)
    losses = [r['total'] for r in read_metrics(tmp_path / 'metrics.jsonl')]
    assert np.mean(losses[900:1000]) < np.mean(losses[:100])
