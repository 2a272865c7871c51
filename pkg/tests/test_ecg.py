"""Synthetic ECG generator, tokenizer and dataset plumbing."""

import json

import numpy as np
import pytest
from scipy.optimize import minimize

from hetdistill.ecg import (AXIS, CLASS_NAMES, IRREGULAR, LEAD_GAINS, N_CLASSES, ST_SHIFT,
                            DataConfig, EcgData, GeneratorConfig, PatchTokenizerConfig,
                            config_hash, export_dataset, generate_record, import_dataset,
                            make_dataset, make_teacher_pool, patch_tokens, patchify, st_window)
from hetdistill.errors import ContractError, InputError
from hetdistill.metrics import binary_auc
from hetdistill.models import student_config, teacher_config


def mask(*classes):
    m = np.zeros(N_CLASSES, dtype=np.int8)
    m[list(classes)] = 1
    return m


class TestGenerateRecord:
    def test_same_seed_is_bitwise_identical(self):
        a = generate_record(42, class_mask=mask(1, 3))
        b = generate_record(42, class_mask=mask(1, 3))
        assert a.signal.tobytes() == b.signal.tobytes()

    def test_different_seeds_differ(self):
        assert not np.array_equal(generate_record(1).signal, generate_record(2).signal)

    def test_shape_and_labels(self):
        rec = generate_record(0, n_leads=12, n_samples=500, class_mask=mask(0, 4))
        assert rec.signal.shape == (12, 500)
        assert rec.labels.tolist() == [1, 0, 0, 0, 1]
        assert rec.sample_rate == 250.0

    @pytest.mark.parametrize("seed", [0, 3, 17, 123])
    def test_st_shift_changes_only_st_windows(self, seed):
        base = generate_record(seed)
        shifted = generate_record(seed, class_mask=mask(ST_SHIFT))
        t = np.arange(base.n_samples) / base.sample_rate
        lo, hi = st_window(False)
        inside = np.zeros(base.n_samples, dtype=bool)
        for r in base.r_peaks:
            inside |= (t - r >= lo) & (t - r < hi)
        diff = np.abs(shifted.signal - base.signal)
        noise_floor = GeneratorConfig().noise_fraction * max(GeneratorConfig().amplitude)
        assert diff[:, ~inside].mean() <= noise_floor
        # same seed means same noise, so outside the windows nothing moves at all
        assert diff[:, ~inside].max() == 0.0
        assert diff[:, inside].min() > 0.0

    def test_lead_gains_match_table(self):
        cfg = GeneratorConfig(noise_fraction=0.0)
        rec = generate_record(5, config=cfg)
        ref = rec.signal[1] / LEAD_GAINS[1]
        for lead, gain in enumerate(LEAD_GAINS):
            np.testing.assert_allclose(rec.signal[lead], gain * ref, rtol=1e-12, atol=1e-15)

    def test_axis_class_uses_axis_table(self):
        cfg = GeneratorConfig(noise_fraction=0.0)
        rec = generate_record(5, class_mask=mask(AXIS), config=cfg)
        ratio = cfg.gains(12, True)[:, None] / cfg.axis_gains[1]
        np.testing.assert_allclose(rec.signal, ratio * rec.signal[1], rtol=1e-12, atol=1e-15)

    def test_irregular_rhythm_jitters_rr(self):
        regular = np.diff(generate_record(9).r_peaks)
        irregular = np.diff(generate_record(9, class_mask=mask(IRREGULAR)).r_peaks)
        np.testing.assert_allclose(regular, regular[0])
        assert irregular.std() > 0.01

    def test_noise_level(self):
        cfg = GeneratorConfig(noise_fraction=0.0)
        clean = generate_record(4, config=cfg).signal
        noisy = generate_record(4).signal
        amp_hi = max(cfg.amplitude)
        assert 0.0 < (noisy - clean).std() <= 0.021 * amp_hi

    @pytest.mark.parametrize("kwargs", [dict(n_leads=0), dict(n_samples=1), dict(sample_rate=-1.0),
                                        dict(class_mask=[1, 0])])
    def test_bad_arguments(self, kwargs):
        with pytest.raises(InputError):
            generate_record(0, **kwargs)


class TestTokenizer:
    def test_one_window_per_lead(self):
        rec = generate_record(0, n_samples=60)
        for stride in (1, 7, 100):
            cfg = PatchTokenizerConfig(patch_length=60, stride=stride, embed_width=8)
            assert patchify(rec, cfg).shape == (12, 8)

    def test_token_count_formula(self):
        rec = generate_record(0, n_samples=1000)
        cfg = PatchTokenizerConfig(patch_length=50, stride=50, embed_width=16)
        assert patchify(rec, cfg).shape[0] == 240 == cfg.token_count(12, 1000)

    def test_default_tokenizers_are_heterogeneous(self):
        rec = generate_record(0)
        t, s = teacher_config(), student_config()
        v_t, v_s = patchify(rec, t.tokenizer), patchify(rec, s.tokenizer)
        assert (v_t.shape[0], v_s.shape[0]) == (240, 120)
        assert v_t.shape[1] != v_s.shape[1] and t.width != s.width

    def test_rows_unit_norm(self):
        tok = patchify(generate_record(3), teacher_config().tokenizer).data
        np.testing.assert_allclose(np.linalg.norm(tok, axis=1), 1.0, atol=1e-9)

    def test_lead_major_order(self):
        rec = generate_record(2)
        cfg = PatchTokenizerConfig(patch_length=25, stride=25, embed_width=8)
        tok = patchify(rec, cfg).data
        lead3 = rec.signal[3, 50:75] @ cfg.embedding()
        np.testing.assert_allclose(tok[3 * 20 + 2], lead3 / np.linalg.norm(lead3), atol=1e-12)

    def test_batched_matches_single(self):
        recs = [generate_record(s) for s in range(3)]
        cfg = student_config().tokenizer
        batched = patch_tokens(np.stack([r.signal for r in recs]), cfg)
        for r, tok in zip(recs, batched):
            np.testing.assert_array_equal(tok, patchify(r, cfg).data)

    def test_patch_longer_than_signal(self):
        with pytest.raises(InputError):
            patchify(generate_record(0, n_samples=40), PatchTokenizerConfig(patch_length=50))


class TestMakeDataset:
    def test_sizes_and_disjoint_seeds(self):
        train, held = make_dataset(10, 0.8, seed=0)
        assert (len(train), len(held)) == (8, 2)
        assert not {r.seed for r in train} & {r.seed for r in held}

    def test_deterministic(self):
        a, b = make_dataset(20, 0.5, seed=3), make_dataset(20, 0.5, seed=3)
        for x, y in zip(a[0] + a[1], b[0] + b[1]):
            assert x.signal.tobytes() == y.signal.tobytes()

    def test_class_rates_balanced_between_splits(self):
        train, held = make_dataset(500, 0.8, seed=1)
        rate_tr = np.mean([r.labels for r in train], axis=0)
        rate_ev = np.mean([r.labels for r in held], axis=0)
        assert np.all(np.abs(rate_tr - rate_ev) <= 0.1 * rate_ev)

    @pytest.mark.parametrize("n,ratio", [(1, 0.5), (10, 0.0), (10, 1.0)])
    def test_bad_arguments(self, n, ratio):
        with pytest.raises(InputError):
            make_dataset(n, ratio)

    def test_teacher_pool_is_disjoint(self):
        cfg = DataConfig(n_records=20)
        train, held = make_dataset(20, 0.8, seed=4, config=cfg)
        pool = make_teacher_pool(15, seed=4, config=cfg)
        assert len(pool) == 15
        assert not {r.seed for r in pool} & {r.seed for r in train + held}

    def test_threads_do_not_change_records(self):
        one = make_dataset(12, 0.5, seed=2, threads=1)
        four = make_dataset(12, 0.5, seed=2, threads=4)
        for x, y in zip(one[0] + one[1], four[0] + four[1]):
            assert x.signal.tobytes() == y.signal.tobytes()


class TestExport:
    def test_round_trip(self, tmp_path):
        cfg = DataConfig(n_records=6)
        train, held = make_dataset(6, 0.5, seed=0, config=cfg)
        export_dataset(train, tmp_path, cfg, "train")
        export_dataset(held, tmp_path, cfg, "eval")
        back = import_dataset(tmp_path, "eval", expected=cfg)
        assert [r.seed for r in back] == [r.seed for r in held]
        for a, b in zip(back, held):
            assert a.signal.tobytes() == b.signal.tobytes()
            assert a.labels.tolist() == b.labels.tolist()

    def test_tampered_manifest_rejected(self, tmp_path):
        cfg = DataConfig(n_records=4)
        export_dataset(make_dataset(4, 0.5, config=cfg)[0], tmp_path, cfg, "train")
        path = tmp_path / "manifest.json"
        manifest = json.loads(path.read_text())
        manifest["config"]["positive_rate"] = 0.5
        path.write_text(json.dumps(manifest))
        with pytest.raises(ContractError):
            import_dataset(tmp_path, "train")

    def test_other_config_rejected(self, tmp_path):
        cfg = DataConfig(n_records=4)
        export_dataset(make_dataset(4, 0.5, config=cfg)[0], tmp_path, cfg, "train")
        with pytest.raises(ContractError):
            import_dataset(tmp_path, "train", expected=DataConfig(n_records=5))

    def test_missing_split(self, tmp_path):
        cfg = DataConfig(n_records=4)
        export_dataset(make_dataset(4, 0.5, config=cfg)[0], tmp_path, cfg, "train")
        with pytest.raises(InputError):
            import_dataset(tmp_path, "eval")


class TestDataConfig:
    def test_dict_round_trip(self):
        cfg = DataConfig(n_records=50, generator=GeneratorConfig(heart_rate=(65.0, 75.0)))
        assert DataConfig.from_dict(cfg.to_dict()) == cfg
        assert config_hash(DataConfig.from_dict(cfg.to_dict())) == config_hash(cfg)

    def test_unknown_keys(self):
        with pytest.raises(InputError):
            DataConfig.from_dict({"n_record": 5})
        with pytest.raises(InputError):
            DataConfig.from_dict({"generator": {"hr": 5}})

    def test_hash_sensitive(self):
        assert config_hash(DataConfig()) != config_hash(DataConfig(n_records=601))


def _fit_logistic(X, y, lam):
    d = X.shape[1]

    def objective(w):
        z = X @ w[:d] + w[d]
        g = 1.0 / (1.0 + np.exp(-z)) - y
        loss = (np.logaddexp(0.0, z) - y * z).mean() + 0.5 * lam * w[:d] @ w[:d]
        return loss, np.concatenate([X.T @ g / len(y) + lam * w[:d], [g.mean()]])

    return minimize(objective, np.zeros(d + 1), jac=True, method="L-BFGS-B").x


@pytest.mark.slow
def test_linear_probe_separates_classes():
    # features: mean patch embedding of each lead, concatenated; the teacher pool
    # of the default experiment serves as the probe's training set
    cfg = DataConfig()
    tok = teacher_config().tokenizer
    held = EcgData(make_dataset(cfg.n_records, cfg.split_ratio, seed=0, config=cfg)[1])
    train = EcgData(make_teacher_pool(3000, seed=0, config=cfg))

    def features(data):
        t = data.tokens(tok)
        return t.reshape(len(data), cfg.n_leads, -1, tok.embed_width).mean(axis=2).reshape(len(data), -1)

    X, Xe = features(train), features(held)
    mu, sd = X.mean(axis=0), X.std(axis=0)
    X, Xe = (X - mu) / sd, (Xe - mu) / sd
    aucs = []
    for k in range(N_CLASSES):
        w = _fit_logistic(X, train.labels[:, k], 1e-2)
        aucs.append(binary_auc(held.labels[:, k], Xe @ w[:-1] + w[-1]))
    print("probe AUC per class", dict(zip(CLASS_NAMES, np.round(aucs, 3))))
    assert np.mean(aucs) >= 0.8
