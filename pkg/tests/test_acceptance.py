"""Acceptance suite: one test per exit criterion, each printing a verdict.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines. Every tolerance is pinned here; nothing is deferred.
"""

import io
import json
import time
from pathlib import Path

import numpy as np
import pytest

from scarecrow.alerts import WebhookSink
from scarecrow.backbone import (
    DetectorScript,
    NetDetector,
    StubDetector,
    conv2d,
    depthwise_conv2d,
    forward,
    pointwise_conv,
    synthesize_network,
)
from scarecrow.dataset import (
    AnnotatedImage,
    Dataset,
    VocObject,
    parse_voc_xml,
    serialize_voc,
)
from scarecrow.evaluation import HarnessConfig, compute_metrics, match_detections, run_harness
from scarecrow.geometry import (
    AnchorConfig,
    AnchorSet,
    BoundingBox,
    CenterBox,
    decode,
    encode,
    encode_array,
    generate_anchors,
    iou,
    to_center,
    to_corner,
)
from scarecrow.monitor import PipelineConfig, PolicyConfig, run_pipeline, write_ppm
from scarecrow.multibox import (
    Detection,
    RawPredictions,
    confidence_loss,
    localization_loss,
    match_anchors,
    nms,
    smooth_l1,
    total_loss,
)

from oracles import (
    conv2d_oracle,
    depthwise_oracle,
    match_oracle,
    nms_oracle,
    pointwise_oracle,
    raster_iou,
)
from test_backbone import fixture_image
from test_monitor import gray_image, make_ppm_dir

DATA_DIR = Path(__file__).parent / "data"


def report(num: int, name: str, ok: bool, detail: str = "") -> None:
    print(f"\n[criterion {num:02d}] {'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, f"criterion {num} ({name}) failed: {detail}"


def lattice_box(rng, cells=1000):
    while True:
        x1, x2 = sorted(rng.integers(0, cells + 1, 2) / cells)
        y1, y2 = sorted(rng.integers(0, cells + 1, 2) / cells)
        if x2 > x1 and y2 > y1:
            return BoundingBox(x1, y1, x2, y2)


def rand_center_box(rng, min_ext=0.02, max_ext=0.6):
    w = float(rng.uniform(min_ext, max_ext))
    h = float(rng.uniform(min_ext, max_ext))
    cx = float(rng.uniform(w / 2 + 1e-4, 1 - w / 2 - 1e-4))
    cy = float(rng.uniform(h / 2 + 1e-4, 1 - h / 2 - 1e-4))
    return CenterBox(cx, cy, w, h)


def test_criterion_01_iou_oracle():
    """Analytic IoU vs the 1000x1000 rasterization oracle."""
    rng = np.random.default_rng(1001)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(10_000):
        a, b = lattice_box(rng), lattice_box(rng)
        analytic = iou(a, b)
        worst = max(worst, abs(analytic - raster_iou(a, b)))
        assert iou(b, a) == analytic  # symmetry, exact
        assert iou(a, a) == 1.0  # identity, exact
    elapsed = time.perf_counter() - start
    report(
        1,
        "iou-oracle",
        worst <= 2e-3 and elapsed < 30.0,
        f"max deviation {worst:.3e} over 10000 pairs in {elapsed:.1f}s",
    )


def test_criterion_02_encode_decode_inverse():
    rng = np.random.default_rng(1002)
    worst = 0.0
    for _ in range(10_000):
        gt = rand_center_box(rng)
        anchor = rand_center_box(rng)
        variances = (float(rng.uniform(0.05, 0.5)), float(rng.uniform(0.05, 0.5)))
        back = to_center(decode(encode(gt, anchor, variances), anchor, variances))
        rel = max(
            abs(g - r) / max(abs(g), 1e-12)
            for g, r in zip(gt.as_tuple(), back.as_tuple())
        )
        worst = max(worst, rel)
    report(2, "encode-decode-inverse", worst <= 1e-9, f"max relative error {worst:.3e}")


def test_criterion_03_anchor_count():
    rng = np.random.default_rng(1003)
    checked = 0
    for _ in range(50):
        n_layers = int(rng.integers(1, 5))
        cfg = AnchorConfig(
            image_size=int(rng.integers(16, 640)),
            feature_map_sizes=tuple(int(v) for v in rng.integers(1, 14, n_layers)),
            aspect_ratios=tuple(
                tuple(float(r) for r in rng.uniform(0.2, 5.0, int(rng.integers(1, 6))))
                for _ in range(n_layers)
            ),
            s_min=float(rng.uniform(0.05, 0.5)),
            s_max=float(rng.uniform(0.5, 1.0)),
            add_extra_scale_box=bool(rng.integers(0, 2)),
        )
        first = generate_anchors(cfg)
        again = generate_anchors(cfg)
        assert len(first) == cfg.expected_count()
        assert np.array_equal(first.boxes, again.boxes)  # bit-identical
        checked += 1
    report(3, "anchor-count", checked == 50, f"{checked} random configs exact + deterministic")


def test_criterion_04_nms_equivalence():
    rng = np.random.default_rng(1004)
    labels = ("a", "b", "c", "d", "e")
    instances = 0
    for _ in range(1000):
        count = int(rng.integers(0, 201))
        n_classes = int(rng.integers(1, 6))
        dets = []
        for _ in range(count):
            w = float(rng.uniform(0.02, 0.6))
            h = float(rng.uniform(0.02, 0.6))
            x1 = float(rng.uniform(0, 1 - w))
            y1 = float(rng.uniform(0, 1 - h))
            dets.append(
                Detection(
                    label=labels[int(rng.integers(0, n_classes))],
                    score=float(rng.uniform(0, 1)),
                    box=BoundingBox(x1, y1, x1 + w, y1 + h),
                )
            )
        threshold = float(rng.uniform(0.2, 0.9))
        top_k = int(rng.integers(1, 250))
        assert nms(dets, threshold, top_k) == nms_oracle(dets, threshold, top_k)
        instances += 1
    report(4, "nms-equivalence", instances == 1000, f"{instances} instances identical to O(n^2) oracle")


def test_criterion_05_matching_coverage():
    rng = np.random.default_rng(1005)
    oracle_checked = 0
    for trial in range(1000):
        n_anchors = int(rng.integers(1, 11)) if trial % 2 else int(rng.integers(1, 501))
        anchors = AnchorSet.from_boxes(
            np.array([rand_center_box(rng).as_tuple() for _ in range(n_anchors)])
        )
        n_gts = int(rng.integers(0, min(20, n_anchors) + 1))
        gts = [
            (int(rng.integers(0, 4)), to_corner(rand_center_box(rng)))
            for _ in range(n_gts)
        ]
        threshold = float(rng.uniform(0.3, 0.7))
        result = match_anchors(anchors, gts, threshold)

        matched_gts = set(result.gt_index[result.gt_index >= 0].tolist())
        assert matched_gts == set(range(n_gts))  # every gt covered
        assert result.n_matched == int(np.sum(result.gt_index >= 0))  # injectivity

        if n_anchors <= 10:
            expected = match_oracle(anchors.boxes, gts, threshold)
            got = [(int(j), float(v)) for j, v in zip(result.gt_index, result.iou)]
            assert got == [(j, pytest.approx(v, abs=1e-12)) for j, v in expected]
            oracle_checked += 1
    report(
        5,
        "matching-coverage",
        oracle_checked >= 300,
        f"1000 instances covered+injective; {oracle_checked} oracle-checked",
    )


def test_criterion_06_loss_checks():
    # zero loss at perfect predictions (offsets equal the encoded targets)
    anchors = AnchorSet.from_boxes([CenterBox(0.5, 0.5, 0.2, 0.2), CenterBox(0.2, 0.2, 0.1, 0.1)])
    gts = [(0, to_corner(anchors[0]))]
    match = match_anchors(anchors, gts, 0.5)
    offsets = np.zeros((2, 4))
    gt_center = np.array([to_center(gts[0][1]).as_tuple()])
    offsets[0] = encode_array(gt_center, anchors.boxes[:1])[0]
    scores = np.zeros((2, 3))
    scores[0, 1] = 500.0
    scores[1, 0] = 500.0
    perfect = RawPredictions(offsets=offsets, scores=scores)
    zero_ok = (
        localization_loss(perfect, gts, match, anchors) == 0.0
        and confidence_loss(perfect, match) == pytest.approx(0.0, abs=1e-12)
    )

    # hand-computed smooth-L1 fixture, exact to 1e-12
    single = AnchorSet.from_boxes([CenterBox(0.5, 0.5, 0.2, 0.2)])
    single_gts = [(0, to_corner(single[0]))]
    single_match = match_anchors(single, single_gts, 0.5)
    preds = RawPredictions(offsets=np.array([[0.5, 0.0, 0.0, 0.0]]), scores=np.zeros((1, 3)))
    loc = localization_loss(preds, single_gts, single_match, single)
    fixture_ok = abs(loc - 0.125) <= 1e-12

    # smooth-L1 continuity at |d| = 1
    below, above = smooth_l1(np.array([1 - 1e-6, 1 + 1e-6]))
    continuity_ok = abs(above - below) < 1e-5

    # uniform softmax over 3 classes -> ln 3
    uniform = RawPredictions(offsets=np.zeros((1, 4)), scores=np.zeros((1, 3)))
    conf = confidence_loss(uniform, single_match, neg_pos_ratio=0.0)
    ln3_ok = abs(conf - np.log(3.0)) <= 1e-9

    report(
        6,
        "loss-checks",
        zero_ok and fixture_ok and continuity_ok and ln3_ok,
        f"loc fixture {loc:.12f}, conf {conf:.12f} vs ln3, continuity gap "
        f"{abs(above - below):.2e}",
    )


def test_criterion_07_convolution_oracles(golden_forward):
    rng = np.random.default_rng(1007)
    worst = 0.0
    for i in range(200):
        h, w = (int(v) for v in rng.integers(2, 17, 2))
        cin = int(rng.integers(1, 9))
        cout = int(rng.integers(1, 9))
        stride = int(rng.integers(1, 4))
        kind = i % 3
        x = rng.normal(size=(h, w, cin))
        if kind == 0:
            k = int(rng.choice([1, 3, 5]))
            kernel = rng.normal(size=(k, k, cin, cout))
            err = np.max(np.abs(conv2d(x, kernel, stride) - conv2d_oracle(x, kernel, stride)))
        elif kind == 1:
            k = int(rng.choice([1, 3, 5]))
            kernel = rng.normal(size=(k, k, cin))
            err = np.max(
                np.abs(depthwise_conv2d(x, kernel, stride) - depthwise_oracle(x, kernel, stride))
            )
        else:
            weights = rng.normal(size=(cin, cout))
            bias = rng.normal(size=cout)
            err = np.max(
                np.abs(pointwise_conv(x, weights, bias) - pointwise_oracle(x, weights, bias))
            )
        worst = max(worst, float(err))
    conv_ok = worst <= 1e-5

    sep_worst = 0.0
    for _ in range(30):
        h, w = (int(v) for v in rng.integers(4, 13, 2))
        cin, cout = (int(v) for v in rng.integers(1, 7, 2))
        stride = int(rng.integers(1, 3))
        x = rng.normal(size=(h, w, cin))
        dw = rng.normal(size=(3, 3, cin))
        pw = rng.normal(size=(cin, cout))
        composed = dw[:, :, :, None] * pw[None, None, :, :]
        gap = np.max(
            np.abs(pointwise_conv(depthwise_conv2d(x, dw, stride), pw) - conv2d(x, composed, stride))
        )
        sep_worst = max(sep_worst, float(gap))
    sep_ok = sep_worst <= 1e-5

    net = synthesize_network(num_classes=3, boxes_per_cell=4, seed=42)
    raw = forward(net, fixture_image(), num_classes=3)
    golden_ok = np.array_equal(raw.offsets, golden_forward["offsets"]) and np.array_equal(
        raw.scores, golden_forward["scores"]
    )
    report(
        7,
        "convolution-oracles",
        conv_ok and sep_ok and golden_ok,
        f"200 instances max err {worst:.2e}; separable gap {sep_worst:.2e}; "
        f"golden bit-exact={golden_ok}",
    )


def test_criterion_08_voc_round_trip():
    rng = np.random.default_rng(1008)
    labels = ["lion", "cheetah", "cat", "goat", "boar"]
    fixed_points = 0
    for _ in range(50):
        w = int(rng.integers(64, 1024))
        h = int(rng.integers(64, 1024))
        objects = []
        for _ in range(int(rng.integers(0, 6))):
            decimals = int(rng.integers(0, 4))
            x1, x2 = np.sort(np.round(rng.uniform(0, w, 2), decimals))
            y1, y2 = np.sort(np.round(rng.uniform(0, h, 2), decimals))
            if x2 <= x1 or y2 <= y1:
                continue
            objects.append(
                VocObject(
                    label=str(rng.choice(labels)),
                    box=BoundingBox(float(x1), float(y1), float(x2), float(y2)),
                )
            )
        doc = serialize_voc(
            AnnotatedImage(
                filename=f"img_{int(rng.integers(1e9))}.jpg",
                width=w,
                height=h,
                depth=3,
                objects=tuple(objects),
            )
        )
        once = parse_voc_xml(doc)
        assert parse_voc_xml(serialize_voc(once)) == once
        fixed_points += 1

    base = serialize_voc(
        AnnotatedImage(
            filename="g.jpg",
            width=400,
            height=400,
            depth=3,
            objects=(VocObject("lion", BoundingBox(48, 24, 280, 360)),),
        )
    )
    guards = [
        (base.replace("<size>", "<x>").replace("</size>", "</x>"), "missing <size>"),
        (base.replace("<xmax>280</xmax>", ""), "object[0]/bndbox: missing <xmax>"),
        (base.replace("<xmax>280</xmax>", "<xmax>48</xmax>"), "object[0]"),
        (base.replace("<xmax>280</xmax>", "<xmax>4800</xmax>"), "outside image"),
    ]
    fired = 0
    for doc, fragment in guards:
        with pytest.raises(ValueError) as err:
            parse_voc_xml(doc)
        assert fragment in str(err.value), (fragment, str(err.value))
        fired += 1
    report(
        8,
        "voc-round-trip",
        fixed_points == 50 and fired == len(guards),
        f"{fixed_points} documents fixed-point; {fired} position-bearing guards fired",
    )


def test_criterion_09_metrics_conservation():
    rng = np.random.default_rng(1009)
    labels = ["lion", "cheetah", "cat"]
    outcomes = []
    for _ in range(500):
        gts = []
        dets = []
        for _ in range(int(rng.integers(0, 5))):
            box = to_corner(rand_center_box(rng, 0.1, 0.4))
            label = str(rng.choice(labels))
            gts.append((label, box))
            if rng.random() < 0.75:
                dets.append(
                    Detection(
                        label=str(rng.choice(labels)) if rng.random() < 0.25 else label,
                        score=float(rng.uniform(0.2, 1.0)),
                        box=box,
                    )
                )
        for _ in range(int(rng.integers(0, 3))):
            dets.append(
                Detection(
                    label=str(rng.choice(labels)),
                    score=float(rng.uniform(0, 1)),
                    box=to_corner(rand_center_box(rng, 0.05, 0.2)),
                )
            )
        outcome = match_detections(dets, gts, 0.5)
        assert len(outcome.tp) + len(outcome.fn) == len(gts)
        assert len(outcome.tp) + len(outcome.fp) == len(dets)
        outcomes.append(outcome)

    metrics = compute_metrics(outcomes)
    bounded = True
    if metrics.tp + metrics.fp and metrics.tp + metrics.fn and metrics.tp + metrics.fp + metrics.fn:
        bounded = metrics.accuracy <= min(metrics.precision, metrics.recall)

    planted = compute_metrics(
        [match_detections([Detection("lion", 0.9, to_corner(rand_center_box(rng)))], []) for _ in range(5)]
        + [
            match_detections(
                [Detection("lion", 0.9, BoundingBox(0.2, 0.2, 0.6, 0.7))],
                [("lion", BoundingBox(0.2, 0.2, 0.6, 0.7))],
            )
            for _ in range(91)
        ]
        + [match_detections([], [("lion", BoundingBox(0.2, 0.2, 0.6, 0.7))]) for _ in range(4)]
    )
    planted_ok = planted.accuracy == 0.91 and (planted.tp, planted.fp, planted.fn) == (91, 5, 4)
    report(
        9,
        "metrics-conservation",
        bounded and planted_ok,
        f"500 outcomes conserve counts; planted accuracy {planted.accuracy}",
    )


def test_criterion_10_statistical_harness():
    gt_box_px = BoundingBox(20, 20, 60, 70)
    gt_box = BoundingBox(0.2, 0.2, 0.6, 0.7)
    images = [
        AnnotatedImage(
            filename=f"img_{i:02d}.xml", width=100, height=100, depth=3,
            objects=(VocObject("lion", gt_box_px),),
        )
        for i in range(10)
    ]
    dataset = Dataset.build(images)

    steps = 10_000
    start = time.perf_counter()
    within = 0
    measured = []
    for seed in range(100):
        rng = np.random.default_rng(9000 + seed)
        correct = rng.random(steps) < 0.91
        frames = {
            step: (Detection("lion", 0.95, gt_box),)
            for step in range(steps)
            if correct[step]
        }
        metrics = run_harness(
            HarnessConfig(steps=steps),
            dataset=dataset,
            detector=StubDetector(DetectorScript(frames=frames)),
        )
        measured.append(metrics.accuracy)
        if abs(metrics.accuracy - 0.91) <= 0.02:
            within += 1
    elapsed = time.perf_counter() - start
    report(
        10,
        "statistical-harness",
        within >= 99 and elapsed < 120.0,
        f"{within}/100 seeds within 0.91±0.02 (range {min(measured):.4f}-{max(measured):.4f}) "
        f"in {elapsed:.0f}s",
    )


def lion_cat_script():
    box = BoundingBox(0.2, 0.2, 0.6, 0.7)
    frames = {}
    for i in range(10, 26):
        frames[i] = [Detection("lion", 0.9, box)]
    for i in range(30, 41):
        frames.setdefault(i, []).append(Detection("cat", 0.8, box))
    return DetectorScript(frames={k: tuple(v) for k, v in frames.items()})


def test_criterion_11_end_to_end_scenario(tmp_path):
    source = make_ppm_dir(tmp_path / "frames", 60)
    log = io.StringIO()
    alert_path = tmp_path / "alerts.jsonl"

    from scarecrow.alerts import FileSink

    result = run_pipeline(
        PipelineConfig(
            source=source,
            detector=StubDetector(lion_cat_script()),
            policy=PolicyConfig(),  # K=3, M=5, M_clear=5, lion predator, cat ignore
            sink=FileSink(alert_path),
            log=log,
            fps=200.0,
        )
    )
    records = [json.loads(line) for line in log.getvalue().splitlines()]
    golden = [
        json.loads(line)
        for line in (DATA_DIR / "golden_transcript.jsonl").read_text().splitlines()
    ]
    transcript_ok = records == golden
    counts_ok = (
        result.events_opened == 1
        and result.commands_issued == 1
        and result.alerts_dispatched == 1
        and result.frames_processed == 60
    )
    opened = records[0]
    open_frame_ok = opened["kind"] == "opened" and opened["ts_ms"] == 60  # frame 12 @ 200fps
    no_cat = all(r["class"] == "lion" for r in records)
    alerts = alert_path.read_text().splitlines()
    report(
        11,
        "end-to-end-scenario",
        transcript_ok and counts_ok and open_frame_ok and no_cat and len(alerts) == 1,
        f"transcript match={transcript_ok}, one predator event opened at frame 12, "
        f"{len(alerts)} alert delivered, zero cat actions",
    )


class _SlowStub:
    def __init__(self, script, delay_s):
        self.inner = StubDetector(script)
        self.delay_s = delay_s

    def detect(self, image, frame_index):
        time.sleep(self.delay_s)
        return self.inner.detect(image, frame_index)


def test_criterion_12_backpressure(tmp_path):
    count = 40
    source = make_ppm_dir(tmp_path / "frames", count)
    box = BoundingBox(0.2, 0.2, 0.6, 0.7)
    script = DetectorScript(
        frames={i: (Detection("lion", 0.9, box),) for i in range(count)}
    )
    result = run_pipeline(
        PipelineConfig(
            source=source,
            detector=_SlowStub(script, delay_s=0.04),
            policy=PolicyConfig(),
            fps=100.0,
            queue_depth=4,
        )
    )
    indices = result.processed_indices
    unique_ok = len(set(indices)) == len(indices)
    ordered_ok = list(indices) == sorted(indices)
    fresh_ok = indices[-1] >= count - 5
    events_ok = result.events_opened == 1 and result.events_closed == 1
    report(
        12,
        "backpressure",
        result.frames_dropped > 0 and unique_ok and ordered_ok and fresh_ok and events_ok,
        f"dropped {result.frames_dropped}, processed {len(indices)} unique in-order frames, "
        f"event opened+closed",
    )


def test_criterion_13_alert_delivery(tmp_path, fake_endpoint):
    # fail, fail, succeed: one delivery after 0.5 s and 1 s backoffs
    flaky, flaky_url = fake_endpoint([500, 500, 200])
    sleeps = []
    sink = WebhookSink(flaky_url, tmp_path / "spool.jsonl", sleep=sleeps.append)
    outcome = sink.deliver({"event_id": 1, "class": "lion"})
    schedule_ok = (
        outcome == "delivered"
        and sleeps == [0.5, 1.0]
        and len(flaky.requests) == 3
        and sink.spooled_payloads() == []
    )

    # permanently failing endpoint: payload lands in the spool
    dead, dead_url = fake_endpoint([500])
    dead_sink = WebhookSink(dead_url, tmp_path / "spool2.jsonl", sleep=lambda s: None)
    spooled = dead_sink.deliver({"event_id": 2, "class": "lion"})
    spool_ok = spooled == "spooled" and dead_sink.spooled_payloads() == [
        {"event_id": 2, "class": "lion"}
    ]

    # replay against a healthy endpoint delivers it
    healthy, healthy_url = fake_endpoint([200])
    replayer = WebhookSink(healthy_url, tmp_path / "spool2.jsonl", sleep=lambda s: None)
    delivered, remaining = replayer.replay_spool()
    replay_ok = (
        (delivered, remaining) == (1, 0)
        and healthy.requests == [{"event_id": 2, "class": "lion"}]
        and replayer.spooled_payloads() == []
    )
    report(
        13,
        "alert-delivery",
        schedule_ok and spool_ok and replay_ok,
        f"backoffs {sleeps}, exactly one delivery; spool+replay round trip",
    )


def test_criterion_14_throughput():
    detector = NetDetector(
        synthesize_network(num_classes=3, seed=0),
        class_names=("cat", "cheetah", "lion"),
    )
    rng = np.random.default_rng(14)
    frames = [gray_image(160, 0.3), gray_image(160, 0.6)]
    frames.append(fixture_image(160))
    detector.detect(frames[0], 0)  # warm-up outside the timed window

    n = 40
    latencies = []
    start = time.perf_counter()
    for i in range(n):
        t0 = time.perf_counter()
        detector.detect(frames[i % len(frames)], i)
        latencies.append(time.perf_counter() - t0)
    elapsed = time.perf_counter() - start
    fps = n / elapsed
    p99_ms = float(np.percentile(np.array(latencies) * 1000.0, 99))
    report(
        14,
        "throughput",
        fps >= 10.0 and p99_ms <= 100.0,
        f"{fps:.1f} frames/s end-to-end, p99 {p99_ms:.1f} ms on 160x160",
    )
