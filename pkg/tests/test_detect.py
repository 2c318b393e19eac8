import math

import numpy as np
import pytest

from stent_tracker.core import GrayFrame, Point2
from stent_tracker.detect import (
    DetectorParams,
    Heatmap,
    TophatDetector,
    correct_heatmap,
    extract_peaks,
    heatmap_loss,
    render_heatmap,
    tophat_detect,
    tophat_response,
)
from stent_tracker.errors import DimensionError

from conftest import det, flat_frame


def dip_frame(centers, sigma=2.0, depth=80.0, size=64, background=170.0):
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    image = np.full((size, size), background)
    for cx, cy in centers:
        image -= depth * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma * sigma))
    return GrayFrame.from_float(image)


def test_constant_frame_has_no_detections():
    assert tophat_detect(flat_frame(), DetectorParams()) == []


def test_single_dip_detected_near_center():
    found = tophat_detect(dip_frame([(30.3, 25.7)]), DetectorParams())
    assert len(found) == 1
    assert found[0].position.distance(Point2(30.3, 25.7)) < 1.0
    assert found[0].score == pytest.approx(1.0)


def test_two_separated_dips():
    found = TophatDetector(DetectorParams(nms_radius=5.0)).detect(dip_frame([(15, 30), (45, 30)]), index=4)
    assert len(found) == 2
    assert all(d.frame == 4 for d in found)


def test_response_is_normalized():
    hm = tophat_response(dip_frame([(20, 20)]), DetectorParams())
    assert hm.values.max() == pytest.approx(1.0)
    assert hm.values.min() >= 0.0


def test_render_heatmap_cases():
    assert not render_heatmap([], 2.0, (16, 12)).values.any()
    hm = render_heatmap([Point2(10, 7)], 2.0, (16, 12))
    assert hm.shape == (12, 16)
    assert hm.values[7, 10] == 1.0
    hm = render_heatmap([Point2(10, 10), Point2(14, 10)], 2.0, (24, 24))
    assert hm.values[10, 12] == pytest.approx(math.exp(-0.5), abs=1e-12)


def test_render_then_extract_recovers_point():
    hm = render_heatmap([Point2(20, 15)], 2.0, (40, 40))
    (peak,) = extract_peaks(hm, 0.5, 5.0)
    assert peak.position == Point2(20.0, 15.0)
    assert peak.score == 1.0

    hm = render_heatmap([Point2(20.3, 15.6)], 2.0, (40, 40))
    (peak,) = extract_peaks(hm, 0.5, 5.0)
    assert peak.position.distance(Point2(20.3, 15.6)) < 0.1


def test_extract_below_threshold_is_empty():
    hm = Heatmap(np.full((10, 10), 0.2))
    assert extract_peaks(hm, 0.5, 3.0) == []


def test_nms_keeps_higher_of_close_peaks():
    values = np.zeros((20, 20))
    values[10, 10] = 0.9
    values[10, 13] = 0.8
    (peak,) = extract_peaks(Heatmap(values), 0.5, 5.0, frame=2)
    assert peak.position == Point2(10.0, 10.0)
    assert peak.score == 0.9
    assert peak.frame == 2


def test_heatmap_loss_cases():
    n = 5 * 4
    gt = Heatmap(np.zeros((4, 5)))
    assert heatmap_loss(gt, gt) == 0.0

    target = np.zeros((4, 5))
    target[1, 2] = 1.0
    assert heatmap_loss(Heatmap(np.zeros((4, 5))), Heatmap(target)) == pytest.approx(3 / n, abs=1e-12)
    assert heatmap_loss(Heatmap(target), Heatmap(np.zeros((4, 5)))) == pytest.approx(1 / n, abs=1e-12)

    with pytest.raises(DimensionError):
        heatmap_loss(Heatmap(np.zeros((4, 5))), Heatmap(np.zeros((5, 4))))


def test_correct_heatmap_scaling():
    rng = np.random.default_rng(1)
    hm = Heatmap(rng.uniform(size=(30, 30)))
    d = det(15, 15)

    assert correct_heatmap(hm, [d], [1.0]) == hm

    zeroed = correct_heatmap(hm, [d], [0.0], w=9).values
    assert not zeroed[11:20, 11:20].any()
    mask = np.ones((30, 30), dtype=bool)
    mask[11:20, 11:20] = False
    assert np.array_equal(zeroed[mask], hm.values[mask])

    halved = correct_heatmap(hm, [d], [0.5], w=9).values
    assert np.array_equal(halved[11:20, 11:20], hm.values[11:20, 11:20] * 0.5)


def test_correct_heatmap_overlap_takes_larger_multiplier():
    hm = Heatmap(np.ones((20, 20)))
    out = correct_heatmap(hm, [det(8, 8), det(10, 8)], [0.2, 0.7], w=5).values
    assert out[8, 9] == 0.7
    assert out[8, 6] == 0.2


def test_correct_heatmap_rejects_even_window():
    hm = Heatmap(np.ones((5, 5)))
    with pytest.raises(ValueError):
        correct_heatmap(hm, [det(2, 2)], [0.5], w=4)
