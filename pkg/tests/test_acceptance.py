"""End-to-end acceptance gate.

Each numbered criterion below is a single test, so a verbose run prints one
pass or fail line per criterion.  Tolerances and budgets are pinned here as
constants; loosening them is a contract change, not a test fix.
"""

import dataclasses
import os
import time

import numpy as np
import pytest

import oracles
from adod.blocks import ChannelAttentionBlock, DomainClassifierHead, ResidualBlock
from adod.cli import ABLATE_COMBOS, EXIT_OK, main
from adod.datasets import GroundTruthBox, generate_synthetic_dataset
from adod.evaluation import EvalConfig, average_precision, evaluate_detections, mean_ap
from adod.gradcheck import standard_suite
from adod.inference import detect_on_manifest, ground_truth_map
from adod.network import (
    MultiScaleOutput,
    NetworkSpec,
    anchors_for_scale,
    build_network,
    forward_multiscale,
)
from adod.postprocess import BBox, Detection, decode_predictions, nms
from adod.tensor import Tensor
from adod.training import TrainConfig, build_targets, domain_accuracy, domain_loss, train

BLOCK_GRAD_TOL = 1e-4
END_TO_END_GRAD_TOL = 1e-3
GRADCHECK_BUDGET_S = 60.0

FORWARD_EQUIV_ATOL = 1e-10
FORWARD_EQUIV_CASES = 100
FORWARD_EQUIV_BUDGET_S = 30.0

POSTPROCESS_CASES = 1000
AP_ATOL = 1e-12
POSTPROCESS_BUDGET_S = 60.0

ROUND_TRIP_BOXES = 1000
ROUND_TRIP_ATOL = 1e-9

OVERFIT_BUDGET_S = 600.0
NEGATION_ATOL = 1e-12

TINY_SPEC = NetworkSpec(
    input_width=64,
    stage_widths=(4, 8, 16, 32, 64),
    blocks_per_stage=(1, 1, 1, 1, 1),
    num_classes=3,
)


# -- criterion 1: finite-difference gradient verification ---------------------


def test_criterion_1_gradient_checks():
    start = time.perf_counter()
    results = standard_suite(seed=0)
    elapsed = time.perf_counter() - start

    assert len(results) == 5
    by_name = {r.name: r for r in results}
    for name in (
        "channel_attention",
        "residual_block",
        "domain_head",
        "gradient_reversal(lambda=0.7)",
    ):
        assert by_name[name].tolerance == BLOCK_GRAD_TOL
        assert by_name[name].passed, by_name[name].summary()
        assert by_name[name].max_rel_error < BLOCK_GRAD_TOL
    e2e = by_name["end_to_end_tiny_detector"]
    assert e2e.tolerance == END_TO_END_GRAD_TOL
    assert e2e.passed, e2e.summary()
    assert e2e.max_rel_error < END_TO_END_GRAD_TOL
    assert elapsed < GRADCHECK_BUDGET_S, f"suite took {elapsed:.1f}s"


# -- criterion 2: block forwards against scalar references --------------------


def test_criterion_2_forward_equivalence():
    start = time.perf_counter()
    for seed in range(FORWARD_EQUIV_CASES):
        rng = np.random.default_rng(seed)
        att = ChannelAttentionBlock(8, rng, ratio=4)
        x = rng.normal(size=(2, 8, 5, 5))
        ref = oracles.channel_attention_ref(
            x, att.squeeze.weight.data, att.excite.weight.data
        )
        np.testing.assert_allclose(
            att(Tensor(x)).data, ref, atol=FORWARD_EQUIV_ATOL, rtol=0
        )

        res = ResidualBlock(6, rng)
        x = rng.normal(size=(2, 6, 5, 5))
        ref = oracles.residual_block_ref(
            x,
            res.reduce.weight.data,
            res.bn1.gamma.data,
            res.bn1.beta.data,
            res.conv.weight.data,
            res.bn2.gamma.data,
            res.bn2.beta.data,
            res.expand.weight.data,
        )
        np.testing.assert_allclose(
            res(Tensor(x)).data, ref, atol=FORWARD_EQUIV_ATOL, rtol=0
        )

        head = DomainClassifierHead(4, 3, rng, grl_lambda=0.5)
        x = rng.normal(size=(3, 4, 6, 6))
        params = {
            "trunk_a": (head.trunk_a.weight.data, head.trunk_a.bias.data),
            "trunk_b": (head.trunk_b.weight.data, head.trunk_b.bias.data),
            "att_a": (head.att_a.weight.data, head.att_a.bias.data),
            "att_b": (head.att_b.weight.data, head.att_b.bias.data),
            "fc": (head.fc.weight.data, head.fc.bias.data),
        }
        np.testing.assert_allclose(
            head(Tensor(x)).data,
            oracles.domain_head_ref(x, params),
            atol=FORWARD_EQUIV_ATOL,
            rtol=0,
        )
    elapsed = time.perf_counter() - start
    assert elapsed < FORWARD_EQUIV_BUDGET_S, f"{elapsed:.1f}s for {FORWARD_EQUIV_CASES} cases"


# -- criterion 3: output geometry and parameter arithmetic --------------------


def test_criterion_3_shapes_and_parameter_counts():
    spec = NetworkSpec()
    assert spec.input_width == 416
    net = build_network(spec, seed=0)
    rng = np.random.default_rng(0)
    out = forward_multiscale(net, Tensor(rng.uniform(0, 1, (1, 3, 416, 416))), "eval")
    assert out.grid_sizes == (13, 26, 52)
    for head, grid in zip(out.heads, out.grid_sizes):
        assert head.shape == (1, 3 * (5 + spec.num_classes), grid, grid)

    for use_res in (False, True):
        for use_att in (False, True):
            for use_dom in (False, True):
                combo = dataclasses.replace(
                    spec,
                    use_residual=use_res,
                    use_channel_attention=use_att,
                    use_domain=use_dom,
                )
                counted = sum(
                    p.data.size for _, p in build_network(combo, seed=0).named_parameters()
                )
                predicted = oracles.parameter_count_ref(
                    combo.stage_widths,
                    combo.blocks_per_stage,
                    combo.num_classes,
                    use_residual=use_res,
                    use_channel_attention=use_att,
                    use_domain=use_dom,
                    num_domains=combo.num_domains,
                    reduction_ratio=combo.reduction_ratio,
                )
                assert counted == predicted, (use_res, use_att, use_dom)


# -- criterion 4: suppression and average precision against brute force -------


def _random_dets(rng, n):
    dets = []
    for _ in range(n):
        x0, y0 = rng.uniform(0, 0.7, 2)
        w, h = rng.uniform(0.05, 0.3, 2)
        dets.append(
            Detection(
                BBox(x0, y0, min(x0 + w, 1.0), min(y0 + h, 1.0)),
                int(rng.integers(4)),
                # two-decimal scores force plenty of exact ties
                round(float(rng.uniform(0, 1)), 2),
            )
        )
    return dets


def test_criterion_4_postprocess_oracles():
    start = time.perf_counter()
    for seed in range(POSTPROCESS_CASES):
        rng = np.random.default_rng([7, seed])
        dets = _random_dets(rng, int(rng.integers(0, 51)))
        thr = float(rng.uniform(0.2, 0.8))
        assert nms(dets, thr) == oracles.nms_brute(dets, thr)

    for seed in range(POSTPROCESS_CASES):
        rng = np.random.default_rng([8, seed])
        n = int(rng.integers(1, 80))
        scores = np.sort(rng.uniform(0, 1, n))[::-1]
        flags = rng.uniform(0, 1, n) < 0.4
        labeled = [(float(s), bool(f)) for s, f in zip(scores, flags)]
        num_gt = int(flags.sum()) + int(rng.integers(0, 6))
        for interpolation in ("all_point", "eleven_point"):
            got = average_precision(labeled, num_gt, interpolation)
            want = oracles.ap_brute(labeled, num_gt, interpolation)
            assert got == pytest.approx(want, abs=AP_ATOL)

    assert mean_ap([0.8367, 0.7187, 0.5132, 0.6454, 0.0]) == 54.28
    elapsed = time.perf_counter() - start
    assert elapsed < POSTPROCESS_BUDGET_S, f"{elapsed:.1f}s"


# -- criterion 5: target encoding inverts through the decoder -----------------


def test_criterion_5_encode_decode_round_trip():
    spec = TINY_SPEC
    k = spec.num_classes
    rng = np.random.default_rng(2024)
    for _ in range(ROUND_TRIP_BOXES):
        w = float(rng.uniform(0.05, 0.45))
        h = float(rng.uniform(0.05, 0.45))
        gt = GroundTruthBox(
            int(rng.integers(k)),
            float(rng.uniform(w / 2 + 0.01, 1 - w / 2 - 0.01)),
            float(rng.uniform(h / 2 + 0.01, 1 - h / 2 - 0.01)),
            w,
            h,
        )
        targets = build_targets([[gt]], spec)
        assigned = [
            (idx, st) for idx, st in enumerate(targets.scales) if st.obj_mask.sum()
        ]
        assert len(assigned) == 1
        scale_idx, st = assigned[0]
        a, row, col = np.argwhere(st.obj_mask[0] == 1.0)[0]
        grid = st.obj_mask.shape[-1]

        head = np.full((1, 3, 5 + k, grid, grid), -20.0)
        head[0, a, 0:4, row, col] = st.t_box[0, a, :, row, col]
        head[0, a, 4, row, col] = 8.0
        head[0, a, 5 + gt.class_id, row, col] = 8.0

        dets = decode_predictions(
            head.reshape(1, 3 * (5 + k), grid, grid),
            anchors_for_scale(spec, MultiScaleOutput.scale_names[scale_idx]),
            spec.input_width,
            conf_threshold=0.25,
        )[0]
        assert len(dets) == 1
        det = dets[0]
        assert det.class_id == gt.class_id
        corner = gt.to_corner()
        np.testing.assert_allclose(
            det.bbox.as_tuple(),
            (corner.x_min, corner.y_min, corner.x_max, corner.y_max),
            atol=ROUND_TRIP_ATOL,
            rtol=0,
        )


# -- criterion 6: a tiny detector overfits twenty images ----------------------


def test_criterion_6_toy_overfit(tmp_path):
    start = time.perf_counter()
    manifest = generate_synthetic_dataset(
        11, 20, 3, 1, tmp_path / "data", image_size=64
    )
    net = build_network(TINY_SPEC, seed=11)
    cfg = TrainConfig(
        input_width=64, epochs=50, batch_size=4, learning_rate=0.003, seed=11
    )
    result = train(net, manifest, cfg)
    first = result.breakdowns[0].total
    last = result.breakdowns[-1].total
    assert last < 0.5 * first, f"loss {first:.4f} -> {last:.4f}"

    rows = detect_on_manifest(net, manifest, 0.005, 0.45)
    report, _ = evaluate_detections(rows, ground_truth_map(manifest), 3, EvalConfig())
    assert report.map_percent > 50.0, f"train-split mAP {report.map_percent}"
    elapsed = time.perf_counter() - start
    assert elapsed < OVERFIT_BUDGET_S, f"{elapsed:.1f}s"


# -- criterion 7: the adversarial branch --------------------------------------


def test_criterion_7a_domain_heads_learn_without_reversal_pressure(tmp_path):
    manifest = generate_synthetic_dataset(
        11, 20, 3, 2, tmp_path / "data", image_size=64
    )
    spec = dataclasses.replace(
        TINY_SPEC, use_domain=True, reduction_ratio=4, grl_lambda=0.0
    )
    net = build_network(spec, seed=11)
    cfg = TrainConfig(
        input_width=64,
        epochs=50,
        batch_size=4,
        learning_rate=0.003,
        lambda_domain=1.0,
        seed=11,
    )
    train(net, manifest, cfg)
    accuracy = domain_accuracy(net, manifest, 64)
    assert accuracy >= 0.9, f"domain accuracy {accuracy:.4f}"


def test_criterion_7b_reversal_negates_trunk_gradients():
    base = dataclasses.replace(
        TINY_SPEC, use_domain=True, reduction_ratio=4, grl_lambda=1.0
    )
    reversed_net = build_network(base, seed=7)
    plain_net = build_network(
        dataclasses.replace(base, domain_reversal=False), seed=7
    )
    rng = np.random.default_rng(7)
    images = Tensor(rng.uniform(0, 1, (4, 3, 64, 64)))
    ids = [0, 1, 0, 1]

    grads = {}
    for tag, net in (("rev", reversed_net), ("plain", plain_net)):
        output = forward_multiscale(net, images, "train")
        term, _ = domain_loss(output.domain_logits, ids, 1.0)
        term.backward()
        grads[tag] = {
            name: (None if p.grad is None else p.grad.copy())
            for name, p in net.named_parameters()
        }

    trunk = [name for name in grads["rev"] if "domain" not in name]
    heads = [name for name in grads["rev"] if "domain" in name]
    assert trunk and heads

    touched = 0.0
    for name in trunk:
        g_rev, g_plain = grads["rev"][name], grads["plain"][name]
        if g_plain is None:
            assert g_rev is None
            continue
        np.testing.assert_allclose(g_rev, -g_plain, atol=NEGATION_ATOL, rtol=0)
        touched = max(touched, float(np.abs(g_plain).max()))
    assert touched > 0.0, "domain loss never reached the trunk"
    for name in heads:
        np.testing.assert_allclose(
            grads["rev"][name], grads["plain"][name], atol=NEGATION_ATOL, rtol=0
        )


@pytest.fixture(scope="module")
def ablate_pair(tmp_path_factory):
    """The full eight-row sweep, run twice with one seed and configuration."""
    root = tmp_path_factory.mktemp("ablate-pair")
    dirs = (root / "a", root / "b")
    for out in dirs:
        assert main(["ablate", "--out", str(out), "--seed", "2"]) == EXIT_OK
    return dirs


def test_criterion_7c_ablation_table(ablate_pair):
    out = ablate_pair[0]
    with open(out / "ablation.csv", "r", encoding="utf-8") as fh:
        rows = fh.read().splitlines()
    header = rows[0].split(",")
    for group in ("clean", "cast"):
        assert f"{group}_map" in header
        assert sum(1 for col in header if col.startswith(f"{group}_ap_")) == 3
    assert len(rows) == 1 + len(ABLATE_COMBOS)
    labels = [row.split(",")[0] for row in rows[1:]]
    assert labels == [combo[0] for combo in ABLATE_COMBOS]
    assert all(row.endswith(",ok") for row in rows[1:])
    # every row carries numbers in both validation groups
    for row in rows[1:]:
        cells = row.split(",")
        assert all(cells[4:12]), row


# -- criterion 8: byte-reproducible reruns ------------------------------------


def _tree_files(root):
    found = {}
    for dirpath, _, filenames in os.walk(root):
        for name in filenames:
            full = os.path.join(dirpath, name)
            found[os.path.relpath(full, root)] = full
    return found


def _strip_seconds(raw: bytes) -> list:
    # metrics rows end with a wall-clock column that is exempt by design
    return [line.rsplit(",", 1)[0] for line in raw.decode("utf-8").splitlines()]


def assert_trees_byte_identical(dir_a, dir_b):
    files_a, files_b = _tree_files(dir_a), _tree_files(dir_b)
    skip = {"run-metadata.json"}
    names_a = {rel for rel in files_a if os.path.basename(rel) not in skip}
    names_b = {rel for rel in files_b if os.path.basename(rel) not in skip}
    assert names_a == names_b
    for rel in sorted(names_a):
        with open(files_a[rel], "rb") as fh:
            raw_a = fh.read()
        with open(files_b[rel], "rb") as fh:
            raw_b = fh.read()
        if os.path.basename(rel) == "metrics.csv":
            assert _strip_seconds(raw_a) == _strip_seconds(raw_b), rel
        else:
            assert raw_a == raw_b, f"{rel} differs between reruns"


def test_criterion_8_reruns_are_byte_identical(tmp_path, ablate_pair):
    gen_dirs = (tmp_path / "gen-a", tmp_path / "gen-b")
    for out in gen_dirs:
        code = main([
            "gen-data", "--out", str(out), "--seed", "11",
            "--n", "20", "--domains", "2", "--classes", "3", "--image-size", "64",
        ])
        assert code == EXIT_OK
    assert_trees_byte_identical(*gen_dirs)

    train_dirs = (tmp_path / "train-a", tmp_path / "train-b")
    for out in train_dirs:
        code = main([
            "train", "--out", str(out), "--seed", "11",
            "--manifest", str(gen_dirs[0] / "manifest.tsv"),
            "--set", "input_width=64", "--set", "stage_widths=4,8,16,32,64",
            "--set", "blocks_per_stage=1,1,1,1,1", "--set", "num_classes=3",
            "--set", "epochs=3", "--set", "batch_size=4",
            "--set", "checkpoint_every=2",
        ])
        assert code == EXIT_OK
    assert (train_dirs[0] / "model-epoch0002.ckpt").is_file()
    assert (train_dirs[0] / "loss-curves.png").is_file()
    assert_trees_byte_identical(*train_dirs)

    assert_trees_byte_identical(*ablate_pair)
