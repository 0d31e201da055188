import numpy as np
import pytest
import torch

from src.corruption.proposals import ProposalSet
from src.decoder.consistency import build_detector
from src.decoder.features import ImageFeatures, pad_to_stride
from src.errors import DomainError, ShapeError
from src.geometry.boxes import from_signal_space
from src.objective.losses import detection_loss
from src.objective.matcher import LossWeights, match


def random_image(seed, height=32, width=32):
    return np.random.default_rng(seed).integers(0, 256, size=(height, width, 3), dtype=np.uint8)


class TestFeatures:
    def test_grid_size(self, tiny_model):
        assert tiny_model.extract_features(random_image(0, 64, 64)).maps.shape[-2:] == (8, 8)

    def test_odd_sizes_are_padded(self, tiny_model):
        features = tiny_model.extract_features(random_image(0, 65, 64))
        assert features.maps.shape[-2:] == (9, 8)
        assert features.image_sizes == [(65, 64)]

    def test_identical_images_identical_features(self, tiny_model):
        a = tiny_model.extract_features(random_image(3))
        b = tiny_model.extract_features(random_image(3))
        assert torch.equal(a.maps, b.maps)

    def test_empty_image(self, tiny_model):
        with pytest.raises(DomainError):
            tiny_model.extract_features(np.zeros((0, 0, 3), dtype=np.uint8))

    def test_wrong_channel_count(self, tiny_model):
        with pytest.raises(DomainError):
            tiny_model.extract_features(np.zeros((8, 8), dtype=np.uint8))

    def test_pad_to_stride(self):
        batch = pad_to_stride([torch.ones(3, 10, 17), torch.ones(3, 16, 8)], 8)
        assert batch.shape == (2, 3, 16, 24)
        assert float(batch[0, :, 10:].abs().sum()) == 0.0

    def test_whwh(self):
        features = ImageFeatures(torch.zeros(2, 1, 1, 1), 8, [(32, 48), (16, 16)])
        assert features.whwh().tolist() == [[48, 32, 48, 32], [16, 16, 16, 16]]


class TestConsistencyFunction:
    def test_output_shapes(self, tiny_model):
        features = tiny_model.extract_features(random_image(1))
        out = tiny_model.f_theta(features, ProposalSet(torch.randn(500, 4), sigma=10.0))
        assert out.x_cls.shape == (500, 3)
        assert out.x_box.shape == (500, 4)
        assert out.x_0.shape == (500, 4)
        assert torch.equal(out.x_box, from_signal_space(out.x_0))

    def test_no_proposals(self, tiny_model):
        features = tiny_model.extract_features(random_image(1))
        out = tiny_model.f_theta(features, torch.zeros(1, 0, 4), 1.0)
        assert out.x_box.shape == (1, 0, 4)
        assert out.x_cls.shape == (1, 0, 3)

    def test_identity_at_sigma_min(self, tiny_model):
        features = tiny_model.extract_features(random_image(2))
        generator = torch.Generator().manual_seed(0)
        for _ in range(100):
            boxes = torch.randn(10, 4, generator=generator) * 3
            out = tiny_model.f_theta(features, ProposalSet(boxes, sigma=tiny_model.schedule.sigma_min))
            assert torch.allclose(out.x_0, boxes, atol=1e-7, rtol=0)

    def test_per_image_sigma(self, tiny_model):
        features = tiny_model.extract_features([random_image(4), random_image(5)])
        boxes = torch.randn(2, 6, 4)
        out = tiny_model.f_theta(features, boxes, torch.tensor([0.002, 40.0]))
        assert torch.allclose(out.x_0[0], boxes[0], atol=1e-7, rtol=0)
        assert not torch.allclose(out.x_0[1], boxes[1])

    @pytest.mark.parametrize('sigma', [0.001, 81.0])
    def test_sigma_outside_schedule(self, tiny_model, sigma):
        features = tiny_model.extract_features(random_image(1))
        with pytest.raises(DomainError):
            tiny_model.f_theta(features, ProposalSet(torch.randn(4, 4), sigma=sigma))

    def test_batch_mismatch(self, tiny_model):
        features = tiny_model.extract_features(random_image(1))
        with pytest.raises(ShapeError):
            tiny_model.f_theta(features, torch.randn(2, 4, 4), 1.0)

    def test_initial_scores_follow_prior(self, tiny_model):
        features = tiny_model.extract_features(random_image(1))
        out = tiny_model.f_theta(features, ProposalSet(torch.randn(50, 4), sigma=80.0))
        assert float(out.scores.max()) < 0.5


def test_gradients_match_finite_differences(tiny_settings):
    """Analytic gradients of a fixed-match loss against central differences (single stage, float64)"""
    torch.manual_seed(0)
    model_settings = tiny_settings.model.model_copy(update={'num_stages': 1})
    model = build_detector(model_settings, tiny_settings.schedule.to_schedule(), 3).double().eval()
    with torch.no_grad():
        maps = model.extract_features(random_image(6)).maps
    features = ImageFeatures(maps, 8, [(32, 32)])

    x = torch.tensor([[0.1, -0.2, -0.5, -0.4], [-0.3, 0.2, -0.6, -0.5]], dtype=torch.float64)
    proposals = ProposalSet(x, sigma=0.5)
    gt_boxes = torch.tensor([[0.55, 0.4, 0.3, 0.25]], dtype=torch.float64)
    gt_labels = torch.tensor([1])
    weights = LossWeights()
    matching = match(model.f_theta(features, proposals), gt_boxes, gt_labels, weights)

    def loss():
        return detection_loss(model.f_theta(features, proposals), gt_boxes, gt_labels, matching, weights).total

    stage = model.head.stages[-1]
    checked = [stage.class_logits.weight, stage.bboxes_delta.weight, model.head.sigma_embedding.mlp[0].weight]
    model.zero_grad()
    loss().backward()

    eps = 1e-6
    for param in checked:
        flat = param.data.view(-1)
        for index in (0, flat.numel() // 3, flat.numel() - 1):
            analytic = float(param.grad.view(-1)[index])
            original = float(flat[index])
            with torch.no_grad():
                flat[index] = original + eps
                plus = float(loss())
                flat[index] = original - eps
                minus = float(loss())
                flat[index] = original
            numeric = (plus - minus) / (2 * eps)
            assert abs(analytic - numeric) <= 1e-3 * max(abs(analytic), abs(numeric)) + 1e-7
