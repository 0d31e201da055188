import json
import random

import numpy as np
import pytest

from src.data.records import DatasetRecord, DetectionDataset
from src.errors import EvaluationError
from src.evalkit.coco_eval import EvalReport, evaluate, iou_matrix
from src.evalkit.runner import detect_dataset, evaluate_model
from src.geometry.boxes import Box, Detection
from src.output.results import detections_to_coco, load_results, write_results
from src.sampler.sampler import SamplerConfig


def dataset_of(*images, categories=('a', 'b'), size=100):
    records = []
    for image_id, objects in enumerate(images, 1):
        boxes = [box for box, _ in objects]
        labels = [label for _, label in objects]
        records.append(DatasetRecord(image_id=image_id, width=size, height=size,
                                     boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
                                     labels=np.asarray(labels, dtype=np.int64)))
    return DetectionDataset(records, categories=list(categories))


def perfect(dataset, score=0.9):
    return {r.image_id: [Detection(Box(*b), int(l), score) for b, l in zip(r.boxes.tolist(), r.labels.tolist())]
            for r in dataset}


A = [0.3, 0.3, 0.4, 0.4]
B = [0.75, 0.75, 0.3, 0.3]


class TestEvaluate:
    def test_perfect_detections(self):
        dataset = dataset_of([(A, 0), (B, 1)], [(B, 0)])
        report = evaluate(perfect(dataset), dataset)
        assert report.AP == pytest.approx(1.0)
        assert report.AP50 == pytest.approx(1.0)
        assert report.per_class == {'a': pytest.approx(1.0), 'b': pytest.approx(1.0)}

    def test_no_detections(self):
        dataset = dataset_of([(A, 0)])
        assert evaluate({}, dataset).as_dict() == EvalReport().as_dict() | {'per_class': {'a': 0.0, 'b': 0.0}}

    def test_half_recall(self):
        dataset = dataset_of([(A, 0), (B, 0)])
        report = evaluate({1: [Detection(Box(*A), 0, 0.9)]}, dataset)
        assert report.AP50 == pytest.approx(51 / 101)

    def test_duplicate_is_a_false_positive(self):
        dataset = dataset_of([(A, 0), (B, 0)])
        dets = [Detection(Box(*A), 0, 0.9), Detection(Box(*A), 0, 0.8), Detection(Box(*B), 0, 0.7)]
        report = evaluate({1: dets}, dataset)
        assert report.AP50 == pytest.approx((51 * 1.0 + 50 * 2 / 3) / 101)

    def test_unknown_image(self):
        with pytest.raises(EvaluationError):
            evaluate({99: []}, dataset_of([(A, 0)]))

    def test_order_invariance(self):
        rng = random.Random(0)
        dataset = dataset_of([(A, 0), (B, 1)], [(B, 0)], [(A, 1)])
        dets = {
            r.image_id: [Detection(Box(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                                       rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5)),
                                   rng.randrange(2), rng.random()) for _ in range(6)]
            for r in dataset
        }
        base = evaluate(dets, dataset).as_dict()
        shuffled = {}
        for image_id in reversed(list(dets)):
            shuffled[image_id] = rng.sample(dets[image_id], len(dets[image_id]))
        assert evaluate(shuffled, dataset).as_dict() == base

    def test_area_ranges(self):
        small = [0.5, 0.5, 0.2, 0.2]  # 20 x 20 px
        dataset = dataset_of([(small, 0)])
        report = evaluate(perfect(dataset), dataset)
        assert report.APs == pytest.approx(1.0)
        assert report.APm == 0.0 and report.APl == 0.0

    def test_bounds(self):
        rng = random.Random(1)
        dataset = dataset_of(*[[([rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), 0.3, 0.3], rng.randrange(2))]
                               for _ in range(5)])
        dets = {r.image_id: [Detection(Box(*(np.asarray(r.boxes[0]) + rng.uniform(-0.05, 0.05))),
                                       int(r.labels[0]), rng.random())] for r in dataset}
        report = evaluate(dets, dataset)
        assert 0.0 <= report.AP <= report.AP50 <= 1.0

    def test_iou_matrix(self):
        ious = iou_matrix(np.array([[0, 0, 10, 10]], dtype=float), np.array([[5, 5, 10, 10], [0, 0, 10, 10]], dtype=float))
        assert ious.tolist() == [[pytest.approx(25 / 175), 1.0]]


def sweep_ap50(detections, dataset):
    """AP50 of one class from an explicit sweep over score thresholds"""
    gts = {r.image_id: r.boxes * r.width for r in dataset}
    all_scores = sorted({d.score for dets in detections.values() for d in dets}, reverse=True)
    total_gt = sum(len(g) for g in gts.values())
    points = []
    for threshold in all_scores:
        tp = fp = 0
        for image_id, dets in detections.items():
            taken = set()
            for d in sorted((d for d in dets if d.score >= threshold), key=lambda d: -d.score):
                box = np.asarray(d.box.as_list()) * 100
                best, best_iou = None, 0.5
                for g, gt in enumerate(gts[image_id]):
                    if g in taken:
                        continue
                    value = iou_matrix(to_xywh(box[None]), to_xywh(gt[None]))[0, 0]
                    if value >= best_iou:
                        best, best_iou = g, value
                if best is None:
                    fp += 1
                else:
                    taken.add(best)
                    tp += 1
        points.append((tp / total_gt, tp / (tp + fp)))
    precision_at = []
    for r in np.arange(101) / 100:
        candidates = [p for rec, p in points if rec >= r]
        precision_at.append(max(candidates) if candidates else 0.0)
    return float(np.mean(precision_at))


def to_xywh(cxcywh):
    return np.stack([cxcywh[:, 0] - cxcywh[:, 2] / 2, cxcywh[:, 1] - cxcywh[:, 3] / 2,
                     cxcywh[:, 2], cxcywh[:, 3]], axis=1)


def test_ap50_matches_threshold_sweep():
    rng = random.Random(2)
    for _ in range(20):
        images = []
        for _ in range(rng.randint(1, 4)):
            images.append([([rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.4),
                             rng.uniform(0.1, 0.4)], 0) for _ in range(rng.randint(1, 3))])
        dataset = dataset_of(*images, categories=('a',))
        detections = {}
        for record in dataset:
            dets = []
            for box in record.boxes.tolist():
                if rng.random() < 0.8:
                    jitter = [v + rng.uniform(-0.05, 0.05) for v in box]
                    dets.append(Detection(Box(*jitter), 0, rng.random()))
            dets += [Detection(Box(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), 0.2, 0.2), 0, rng.random())
                     for _ in range(rng.randint(0, 2))]
            detections[record.image_id] = dets
        if not any(detections.values()):
            continue
        assert evaluate(detections, dataset).AP50 == pytest.approx(sweep_ap50(detections, dataset), abs=1e-9)


def test_results_file_round_trip(tmp_path):
    dataset = dataset_of([(A, 0), (B, 1)], [(B, 0)])
    detections = perfect(dataset)
    path = write_results(detections_to_coco(detections, dataset), tmp_path / 'results.json')
    loaded = load_results(path, dataset)
    assert evaluate(loaded, dataset).AP == pytest.approx(1.0)

    (tmp_path / 'broken.json').write_text('[{"image_id": 1,')
    with pytest.raises(EvaluationError):
        load_results(tmp_path / 'broken.json', dataset)
    with pytest.raises(EvaluationError):
        load_results(tmp_path / 'missing.json', dataset)


@pytest.mark.parametrize('entry, message', [
    ({'image_id': 1, 'category_id': 1, 'bbox': [1, 1, 5, 5]}, 'lacks score'),
    ({'image_id': 1, 'bbox': [1, 1, 5, 5], 'score': 0.5}, 'lacks category_id'),
    ({'image_id': 1, 'category_id': 1, 'bbox': [1, 1, 5], 'score': 0.5}, 'bbox must be 4 numbers'),
    ({'image_id': 1, 'category_id': 1, 'bbox': [1, 1, 5, 5], 'score': 'high'}, 'score must be a number'),
    ([1, 1, 5, 5], 'not an object'),
])
def test_malformed_result_entries(tmp_path, entry, message):
    dataset = dataset_of([(A, 0)])
    path = tmp_path / 'results.json'
    path.write_text(json.dumps([entry]))
    with pytest.raises(EvaluationError, match=message):
        load_results(path, dataset)


def test_runner_scores_oracle(oracle_scene):
    dataset, oracle = oracle_scene
    config = SamplerConfig(n_ss=1, n_p=20)
    detections, seconds = detect_dataset(oracle, dataset, config)
    assert list(detections) == [11] and len(seconds) == 1
    report, _ = evaluate_model(oracle, dataset, config)
    assert report.AP50 == pytest.approx(1.0)
