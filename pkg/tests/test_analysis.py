"""Singular-value spectra and their CSV export."""

import numpy as np
import pytest

from hetdistill.analysis import hidden_matrix, read_spectra, singular_values, svd_spectrum, write_spectra
from hetdistill.ecg import EcgData, make_dataset
from hetdistill.errors import DimensionError, InputError
from hetdistill.optim import TrainConfig
from hetdistill.training import sft_student, train_teacher


class TestSingularValues:
    def test_rank_one(self, rng):
        x = np.outer(rng.standard_normal(20), rng.standard_normal(7))
        s = singular_values(x)
        assert s[0] > 0
        assert np.all(s[1:] <= 1e-8 * s[0])

    def test_orthonormal_rows_are_flat(self, rng):
        q, _ = np.linalg.qr(rng.standard_normal((9, 5)))
        s = singular_values(q.T)
        np.testing.assert_allclose(s, 1.0, atol=1e-9)

    def test_frobenius_identity(self, rng):
        for shape in [(3, 8), (10, 4), (6, 6)]:
            x = rng.standard_normal(shape)
            s = singular_values(x)
            assert abs((s**2).sum() - (x**2).sum()) <= 1e-9 * (x**2).sum()

    def test_sorted_descending(self, rng):
        s = singular_values(rng.standard_normal((12, 5)))
        assert np.all(np.diff(s) <= 0)

    def test_diagonal(self):
        np.testing.assert_allclose(singular_values(np.diag([1.0, -3.0, 2.0])), [3.0, 2.0, 1.0])

    def test_bad_input(self):
        with pytest.raises(DimensionError):
            singular_values(np.zeros(3))
        with pytest.raises(InputError):
            singular_values(np.zeros((0, 3)))


class TestSpectraCsv:
    def test_round_trip_with_ragged_columns(self, tmp_path):
        spectra = {"student": np.array([3.0, 2.0, 0.5]), "teacher": np.array([4.0, 1.0, 0.25, 0.125])}
        path = write_spectra(spectra, tmp_path / "s.csv")
        back = read_spectra(path)
        assert set(back) == {"student", "teacher"}
        for k in spectra:
            np.testing.assert_array_equal(back[k], spectra[k])

    def test_normalised_column(self, tmp_path):
        path = write_spectra({"m": np.array([2.0, 1.0])}, tmp_path / "s.csv")
        lines = open(path).read().splitlines()
        assert lines[0] == "index,m,m_normalized"
        assert lines[2] == "1,1.0,0.5"


def test_svd_spectrum_of_models(tmp_path):
    train, held = make_dataset(12, 0.5, seed=1)
    cfg = TrainConfig(batch_size=4)
    teacher = train_teacher(EcgData(train), steps=1, train=cfg)
    student = sft_student(EcgData(train), steps=1, train=cfg)
    spectra = svd_spectrum(student, EcgData(held), tmp_path / "svd.csv", teacher=teacher)
    assert len(spectra["student"]) == 48 and len(spectra["teacher"]) == 96
    h = hidden_matrix(student, EcgData(held))
    assert h.shape == (6 * 24, 48)
    # unit-norm tokens: squared singular values sum to the token count
    assert (spectra["student"] ** 2).sum() == pytest.approx(h.shape[0], rel=1e-4)
    np.testing.assert_allclose(read_spectra(tmp_path / "svd.csv")["teacher"], spectra["teacher"])
