"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The heavy pipeline criteria share one desk-scale setup: 5,000 digit
images (genuine MNIST if TRIPLETHASH_MNIST_DIR is set, synthetic renders
otherwise), 16-bit codes, 500 queries / 4,500 gallery, mAP@100.
"""

import numpy as np
import pytest

import triplethash as th
from triplethash.evaluation import EvalConfig, mean_ap, pr_curve, split_query_gallery
from triplethash.losses import (
    LossWeights,
    TripletConfig,
    combined_loss,
    entropy_loss,
    quantization_loss,
    rotation_invariance_loss,
    triplet_loss,
)
from triplethash.network import forward_array
from triplethash.retrieval import (
    HashCode,
    binarize,
    codes_from_list,
    encode_dataset,
    hamming_distance,
    knn_search,
    lsh_encode,
    pack_bits,
    radius_search,
)
from triplethash.training import TrainConfig, train, train_phase1

from conftest import finite_difference, relative_error
from synth import (
    digit_dataset,
    genuine_cifar_paths,
    genuine_mnist_paths,
    genuine_mnist_test_paths,
    write_random_cifar,
    write_random_idx,
)
from test_network import network_gradient_check


def announce(number, name, passed):
    print(f"\n[ACCEPTANCE] criterion {number} ({name}): {'PASS' if passed else 'FAIL'}")
    assert passed, f"acceptance criterion {number} ({name}) failed"


# ---------------------------------------------------------------------------
# shared desk-scale pipeline
# ---------------------------------------------------------------------------

SEEDS = (0, 1, 2)
EVAL_CONFIG = EvalConfig(query_count=500, top_k=100, seed=0)


def desk_config(seed):
    return TrainConfig(
        bit_width=16,
        phase1_epochs=8,
        phase2_epochs=20,
        batch_size=32,
        learning_rate=0.01,
        momentum=0.9,
        seed=seed,
        triplets_per_epoch=2000,
        weights=LossWeights(1.0, 0.3, 1.0),
        triplet=TripletConfig(margin=6.0),
    )


@pytest.fixture(scope="module")
def acceptance_dataset():
    genuine = genuine_mnist_paths()
    if genuine:
        full = th.load_mnist_idx(*genuine)
        return full.subset(range(5000), name="mnist-5k")
    return digit_dataset(5000, seed=0, name="synth-5k")


@pytest.fixture(scope="module")
def heldout_batch():
    held = digit_dataset(64, seed=999)
    return np.stack([s.pixels for s in held.samples])


def run_training(dataset, seed, variant):
    config = desk_config(seed)
    params = th.build_network(th.default_layer_spec(16), dataset.dims, seed)
    return train(params, dataset, config, variant=variant)


@pytest.fixture(scope="module")
def trained_uth(acceptance_dataset):
    """Seed-0 full two-phase run, shared by criteria 3, 5 and 6."""
    return run_training(acceptance_dataset, SEEDS[0], "triplet")


def map_of(db):
    queries, gallery = split_query_gallery(db, EVAL_CONFIG)
    return mean_ap(queries, gallery, EVAL_CONFIG.top_k)[0]


# ---------------------------------------------------------------------------
# criterion 1: gradient correctness
# ---------------------------------------------------------------------------


class TestCriterion1Gradients:
    def test_loss_gradients(self):
        worst = 0.0
        for seed in range(10):
            rng = np.random.default_rng(seed)

            fa = rng.uniform(0.1, 0.9, 16)
            fp = fa + 0.05 * rng.standard_normal(16)
            fn = rng.uniform(0.1, 0.9, 16)
            config = TripletConfig(margin=1.0)
            loss, (da, dp, dn) = triplet_loss(fa, fp, fn, config)
            # stay away from the hinge kink where finite differences break
            if loss > 0.05:
                for vec, grad, f in (
                    (fa, da, lambda v: triplet_loss(v, fp, fn, config)[0]),
                    (fp, dp, lambda v: triplet_loss(fa, v, fn, config)[0]),
                    (fn, dn, lambda v: triplet_loss(fa, fp, v, config)[0]),
                ):
                    worst = max(worst, relative_error(grad, finite_difference(f, vec)))

            f_q = rng.uniform(0.0, 1.0, (4, 16))
            f_q[np.abs(f_q - 0.5) < 2e-3] += 5e-3  # off the threshold kink
            _, g_q = quantization_loss(f_q)
            worst = max(
                worst,
                relative_error(g_q, finite_difference(lambda v: quantization_loss(v)[0], f_q)),
            )

            f_e = rng.uniform(0.05, 0.95, (4, 16))
            _, g_e, _ = entropy_loss(f_e)
            worst = max(
                worst,
                relative_error(g_e, finite_difference(lambda v: entropy_loss(v)[0], f_e)),
            )

            ra, rp = rng.standard_normal(16), rng.standard_normal(16)
            _, (ga, gp) = rotation_invariance_loss(ra, rp)
            worst = max(
                worst,
                relative_error(
                    ga, finite_difference(lambda v: rotation_invariance_loss(v, rp)[0], ra)
                ),
            )

            ca = rng.uniform(0.1, 0.9, (3, 8))
            cp = ca + 0.05 * rng.standard_normal((3, 8))
            cn = rng.uniform(0.1, 0.9, (3, 8))
            for f in (ca, cp, cn):
                f[np.abs(f - 0.5) < 2e-3] += 5e-3
            weights, tc = LossWeights(1, 1, 1), TripletConfig(1.0)
            hinge = (
                tc.margin
                + np.sum((ca - cp) ** 2, axis=1)
                - np.sum((ca - cn) ** 2, axis=1)
            )
            if np.any(np.abs(hinge) < 0.05):
                continue
            _, (ga_, gp_, gn_) = combined_loss(ca, cp, cn, weights, tc)

            def total(stack):
                return combined_loss(stack[:3], stack[3:6], stack[6:], weights, tc)[0].l_total

            numeric = finite_difference(total, np.concatenate([ca, cp, cn]))
            worst = max(worst, relative_error(np.concatenate([ga_, gp_, gn_]), numeric))

        announce(1, f"loss gradients, worst rel err {worst:.2e}", worst < 1e-6)

    @staticmethod
    def _kink_distance(params, x):
        """Distance of the forward pass to the nearest relu/pool kink.

        Finite differences are only a valid oracle where the network is
        differentiable; instances sitting within the step size of a relu
        zero crossing or a pooling argmax tie are skipped.
        """
        from numpy.lib.stride_tricks import sliding_window_view

        dist = np.inf
        for spec, layer in zip(params.specs, params.layers):
            if spec.kind == "conv":
                k, s = spec.kernel, spec.stride
                win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
                win = win.transpose(0, 1, 2, 4, 5, 3)
                x = np.einsum("nijabc,abco->nijo", win, layer["w"]) + layer["b"]
            elif spec.kind == "max_pool":
                p = spec.window
                n, h, w, c = x.shape
                xr = (
                    x[:, : (h // p) * p, : (w // p) * p]
                    .reshape(n, h // p, p, w // p, p, c)
                    .transpose(0, 1, 3, 5, 2, 4)
                    .reshape(n, h // p, w // p, c, p * p)
                )
                top2 = np.sort(xr, axis=-1)[..., -2:]
                dist = min(dist, float((top2[..., 1] - top2[..., 0]).min()))
                x = top2[..., 1]
            elif spec.kind == "fully_connected":
                x = x.reshape(x.shape[0], -1) @ layer["w"] + layer["b"]
            elif spec.kind == "relu":
                dist = min(dist, float(np.abs(x).min()))
                x = np.maximum(x, 0.0)
        return dist

    def test_network_layer_gradients(self):
        from triplethash.network import conv, fully_connected, max_pool, relu

        cases = [
            ([fully_connected(8), relu(), fully_connected(4), relu()], (1, 6, 1)),
            ([conv(3, 3, 1), relu(), fully_connected(4), relu()], (6, 6, 2)),
            ([conv(2, 3, 2), relu(), fully_connected(4), relu()], (7, 7, 1)),
            ([conv(2, 3, 1), max_pool(2), fully_connected(4), relu()], (6, 6, 1)),
        ]
        worst = 0.0
        for specs, dims in cases:
            checked, seed = 0, 0
            while checked < 10:
                # mirror network_gradient_check's instance construction
                rng = np.random.default_rng(seed)
                params = th.build_network(specs, dims, seed)
                x = rng.random((2,) + tuple(dims))
                if self._kink_distance(params, x) >= 5e-3:
                    worst = max(worst, network_gradient_check(specs, dims, seed))
                    checked += 1
                seed += 1
        announce(1, f"network layer gradients, worst rel err {worst:.2e}", worst < 1e-3)


# ---------------------------------------------------------------------------
# criterion 2: oracle equivalence
# ---------------------------------------------------------------------------


class TestCriterion2Oracles:
    def test_retrieval_and_metric_oracles(self):
        rng = np.random.default_rng(7)
        ok = True
        for trial in range(100):
            n = int(rng.integers(5, 200))
            m = int(rng.integers(4, 80))
            bits = rng.integers(0, 2, (n, m)).astype(bool)
            labels = rng.integers(0, 4, n).tolist()
            codes = [HashCode(pack_bits(b), m) for b in bits]
            db = codes_from_list(codes, list(range(n)), labels)
            q_bits = rng.integers(0, 2, m).astype(bool)
            query = HashCode(pack_bits(q_bits), m)

            brute = [int(np.sum(bits[i] != q_bits)) for i in range(n)]
            ok &= hamming_distance(db.code(0), query) == brute[0]

            f = rng.random(m)
            ok &= list(binarize(f, 0.5).bits()) == [v > 0.5 for v in f]

            k = int(rng.integers(1, 20))
            expected = sorted((d, i) for i, d in enumerate(brute))[:k]
            ok &= [(nb.distance, nb.id) for nb in knn_search(db, query, k)] == expected

            r = int(rng.integers(0, m + 1))
            expected_r = sorted((d, i) for i, d in enumerate(brute) if d <= r)
            ok &= [(nb.distance, nb.id) for nb in radius_search(db, query, r)] == expected_r
        announce(2, "hamming/binarize/knn/radius vs brute force", ok)

    def test_evaluation_oracles(self):
        from triplethash.evaluation import average_precision

        rng = np.random.default_rng(13)
        ok = True
        for trial in range(100):
            relevance = rng.integers(0, 2, int(rng.integers(1, 60))).tolist()
            k = int(rng.integers(1, 40))
            top = relevance[:k]
            n_rel = sum(top)
            expected = 0.0
            if n_rel:
                expected = sum(
                    sum(top[: i + 1]) / (i + 1) for i in range(len(top)) if top[i]
                ) / n_rel
            ok &= abs(average_precision(relevance, k) - expected) < 1e-12

        for trial in range(20):
            n = int(rng.integers(10, 25))
            m = 8
            bits = rng.integers(0, 2, (n, m)).astype(bool)
            labels = rng.integers(0, 3, n).tolist()
            codes = [HashCode(pack_bits(b), m) for b in bits]
            db = codes_from_list(codes, list(range(n)), labels)
            nq = int(rng.integers(1, 4))
            queries, gallery = db.subset(list(range(nq))), db.subset(list(range(nq, n)))
            value, per_query = mean_ap(queries, gallery, 10)

            expected_aps = []
            for q in range(nq):
                ranked = sorted(
                    (int(np.sum(bits[q] != bits[g])), g) for g in range(nq, n)
                )
                top = [labels[g] == labels[q] for _, g in ranked[:10]]
                n_rel = sum(top)
                ap = 0.0
                if n_rel:
                    ap = sum(
                        sum(top[: i + 1]) / (i + 1) for i in range(len(top)) if top[i]
                    ) / n_rel
                expected_aps.append(ap)
            ok &= per_query == pytest.approx(expected_aps, abs=1e-12)

            curve = pr_curve(queries, gallery)
            total_rel = sum(
                labels[q] == labels[g] for q in range(nq) for g in range(nq, n)
            )
            for point in curve:
                ret = rel_ret = 0
                for q in range(nq):
                    for g in range(nq, n):
                        if int(np.sum(bits[q] != bits[g])) <= point.radius:
                            ret += 1
                            rel_ret += labels[q] == labels[g]
                if ret == 0:
                    ok &= point.precision == 1.0 and point.retrieved_empty
                else:
                    ok &= abs(point.precision - rel_ret / ret) < 1e-12
                ok &= abs(point.recall - (rel_ret / total_rel if total_rel else 0.0)) < 1e-12
        announce(2, "average_precision/mean_ap/pr_curve vs brute force", ok)


# ---------------------------------------------------------------------------
# criteria 3 + 5: loss-driving behavior and quantization gap
# ---------------------------------------------------------------------------


class TestCriterion3LossDriving:
    def test_loss_driving(self, acceptance_dataset, trained_uth):
        params, log = trained_uth
        phase1 = [e.report for e in log.entries if e.phase == 1]
        phase2 = [e.report for e in log.entries if e.phase == 2]

        quant_ok = phase1[-1].l_quant < 0.5 * phase1[0].l_quant
        announce(
            3,
            f"(a) phase-1 quant loss {phase1[0].l_quant:.4f} -> {phase1[-1].l_quant:.4f}",
            quant_ok,
        )

        # (b) mean |relaxed bit mean - 0.5| before vs after phase 1
        config = desk_config(SEEDS[0])
        init_params = th.build_network(
            th.default_layer_spec(16), acceptance_dataset.dims, SEEDS[0]
        )
        p1_params, _, _ = train_phase1(init_params, acceptance_dataset, config)
        pixels = np.stack([s.pixels for s in acceptance_dataset.samples[:1000]])
        f_init, _ = forward_array(
            th.build_network(th.default_layer_spec(16), acceptance_dataset.dims, SEEDS[0]),
            pixels,
        )
        f_after, _ = forward_array(p1_params, pixels)

        def balance_gap(features):
            mu = np.clip(features, 0, 1).mean(axis=0)
            return float(np.abs(mu - 0.5).mean())

        before, after = balance_gap(f_init), balance_gap(f_after)
        announce(3, f"(b) bit balance gap {before:.4f} -> {after:.4f}", after < before)

        smoothed = np.convolve(
            [r.l_total for r in phase2], np.ones(3) / 3, mode="valid"
        )
        announce(
            3,
            f"(c) smoothed phase-2 total loss {smoothed[0]:.4f} -> {smoothed[-1]:.4f}",
            smoothed[-1] < smoothed[0],
        )


class TestCriterion5QuantizationGap:
    def test_heldout_gap(self, trained_uth, heldout_batch):
        params, _ = trained_uth
        features, _ = forward_array(params, heldout_batch)
        bits = (features > 0.5).astype(np.float64)
        gap = float(np.abs(features - bits).mean())
        announce(5, f"held-out mean |F - b| = {gap:.4f}", gap < 0.25)


# ---------------------------------------------------------------------------
# criterion 4: method ordering
# ---------------------------------------------------------------------------


class TestCriterion4MethodOrdering:
    def test_ordering(self, acceptance_dataset, trained_uth):
        uth_maps, rotinv_maps, lsh_maps = [], [], []
        for seed in SEEDS:
            if seed == SEEDS[0]:
                uth_params = trained_uth[0]
            else:
                uth_params, _ = run_training(acceptance_dataset, seed, "triplet")
            uth_maps.append(map_of(encode_dataset(uth_params, acceptance_dataset)))

            rot_params, _ = run_training(acceptance_dataset, seed, "rotinv")
            rotinv_maps.append(map_of(encode_dataset(rot_params, acceptance_dataset)))

            codes = lsh_encode(acceptance_dataset.pixel_matrix(), 16, seed)
            lsh_db = codes_from_list(
                codes,
                [s.index for s in acceptance_dataset.samples],
                [s.label for s in acceptance_dataset.samples],
            )
            lsh_maps.append(map_of(lsh_db))

        med = lambda v: float(np.median(v))
        print(
            f"\n[ACCEPTANCE] criterion 4 mAP@100 medians: "
            f"uth={med(uth_maps):.4f} rotinv={med(rotinv_maps):.4f} lsh={med(lsh_maps):.4f}"
        )
        print(f"  per-seed uth={uth_maps} rotinv={rotinv_maps} lsh={lsh_maps}")
        announce(
            4,
            "median mAP ordering uth > rotinv and uth > lsh",
            med(uth_maps) > med(rotinv_maps) and med(uth_maps) > med(lsh_maps),
        )


# ---------------------------------------------------------------------------
# criterion 6: determinism
# ---------------------------------------------------------------------------


class TestCriterion6Determinism:
    def test_pipeline_determinism(self, acceptance_dataset, trained_uth, tmp_path):
        params_a, log_a = trained_uth
        params_b, log_b = run_training(acceptance_dataset, SEEDS[0], "triplet")

        th.save_params(params_a, tmp_path / "a.params")
        th.save_params(params_b, tmp_path / "b.params")
        params_ok = (tmp_path / "a.params").read_bytes() == (tmp_path / "b.params").read_bytes()

        db_a = encode_dataset(params_a, acceptance_dataset)
        db_b = encode_dataset(params_b, acceptance_dataset)
        th.save_codes(db_a, tmp_path / "a.codes")
        th.save_codes(db_b, tmp_path / "b.codes")
        codes_ok = (tmp_path / "a.codes").read_bytes() == (tmp_path / "b.codes").read_bytes()

        from triplethash.evaluation import evaluate, export_report

        for tag, db in (("a", db_a), ("b", db_b)):
            export_report(
                evaluate(db, EVAL_CONFIG), tmp_path / f"{tag}.csv", tmp_path / f"{tag}.json"
            )
        reports_ok = (
            (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
            and (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        )
        announce(
            6,
            f"params={params_ok} codes={codes_ok} reports={reports_ok}",
            params_ok and codes_ok and reports_ok,
        )


# ---------------------------------------------------------------------------
# criterion 7: format fidelity
# ---------------------------------------------------------------------------


class TestCriterion7Formats:
    def test_mnist_counts(self, tmp_path):
        genuine_train = genuine_mnist_paths()
        genuine_test = genuine_mnist_test_paths()
        if genuine_train and genuine_test:
            train_ds = th.load_mnist_idx(*genuine_train)
            test_ds = th.load_mnist_idx(*genuine_test)
            source = "genuine files"
        else:
            write_random_idx(tmp_path / "tri", tmp_path / "trl", 60000, seed=0)
            write_random_idx(tmp_path / "tei", tmp_path / "tel", 10000, seed=1)
            train_ds = th.load_mnist_idx(tmp_path / "tri", tmp_path / "trl")
            test_ds = th.load_mnist_idx(tmp_path / "tei", tmp_path / "tel")
            source = "format-faithful generated files"
        counts_ok = len(train_ds) == 60000 and len(test_ds) == 10000
        announce(7, f"MNIST counts 60000/10000 on {source}", counts_ok)

    def test_cifar_counts(self, tmp_path):
        genuine = genuine_cifar_paths()
        if genuine:
            train_paths, test_path = genuine
            source = "genuine files"
        else:
            train_paths = []
            for i in range(5):
                path = tmp_path / f"data_batch_{i + 1}.bin"
                write_random_cifar(path, 10000, seed=i)
                train_paths.append(path)
            test_path = tmp_path / "test_batch.bin"
            write_random_cifar(test_path, 10000, seed=9)
            source = "format-faithful generated files"
        train_ds = th.load_cifar10(train_paths)
        count_train = len(train_ds)
        del train_ds
        count_test = len(th.load_cifar10([test_path]))
        counts_ok = count_train == 50000 and count_test == 10000
        announce(7, f"CIFAR-10 counts 50000/10000 on {source}", counts_ok)

    def test_round_trips_bitwise(self, tmp_path):
        from triplethash.dataset import write_cifar10, write_mnist_idx
        from synth import color_digit_dataset, digit_dataset

        ds = digit_dataset(50, seed=4)
        write_mnist_idx(ds, tmp_path / "i", tmp_path / "l")
        reread = th.load_mnist_idx(tmp_path / "i", tmp_path / "l")
        write_mnist_idx(reread, tmp_path / "i2", tmp_path / "l2")
        idx_ok = (
            (tmp_path / "i").read_bytes() == (tmp_path / "i2").read_bytes()
            and (tmp_path / "l").read_bytes() == (tmp_path / "l2").read_bytes()
        )

        cds = color_digit_dataset(20, seed=4)
        write_cifar10(cds, tmp_path / "c")
        write_cifar10(th.load_cifar10([tmp_path / "c"]), tmp_path / "c2")
        cifar_ok = (tmp_path / "c").read_bytes() == (tmp_path / "c2").read_bytes()

        params = th.build_network(th.default_layer_spec(32), (28, 28, 1), seed=3)
        th.save_params(params, tmp_path / "p")
        th.save_params(th.load_params(tmp_path / "p"), tmp_path / "p2")
        params_ok = (tmp_path / "p").read_bytes() == (tmp_path / "p2").read_bytes()

        rng = np.random.default_rng(0)
        bits = rng.integers(0, 2, (40, 48)).astype(bool)
        db = codes_from_list(
            [HashCode(pack_bits(b), 48) for b in bits],
            list(range(40)),
            rng.integers(0, 5, 40).tolist(),
        )
        th.save_codes(db, tmp_path / "cd")
        th.save_codes(th.load_codes(tmp_path / "cd"), tmp_path / "cd2")
        codes_ok = (tmp_path / "cd").read_bytes() == (tmp_path / "cd2").read_bytes()

        announce(
            7,
            f"round-trips idx={idx_ok} cifar={cifar_ok} params={params_ok} codes={codes_ok}",
            idx_ok and cifar_ok and params_ok and codes_ok,
        )
