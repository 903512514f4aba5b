import numpy as np
import pytest

from consolidation.core.errors import ContractError
from consolidation.core.metrics import (AccuracyMatrix, accuracy, average_accuracy, avg_incremental_accuracy,
                                        backward_transfer)


def _matrix(rows):
    m = AccuracyMatrix()
    for row in rows:
        m.add_stage(row, float(np.mean(row)))
    return m


class TestAverageIncrementalAccuracy:
    @pytest.mark.parametrize("seen, expected", [([80, 70, 60], 70.0), ([55], 55.0), ([42.5] * 6, 42.5)])
    def test_values(self, seen, expected):
        assert avg_incremental_accuracy(seen) == pytest.approx(expected)

    def test_empty(self):
        with pytest.raises(ContractError):
            avg_incremental_accuracy([])


class TestBackwardTransfer:
    def test_no_forgetting(self):
        assert backward_transfer(_matrix([[90], [90, 80], [90, 80, 70]])) == 0.0

    def test_uniform_drop(self):
        assert backward_transfer(_matrix([[90], [85, 80], [80, 70, 75]])) == pytest.approx(-10.0)

    def test_two_stages(self):
        assert backward_transfer(_matrix([[90], [70, 60]])) == pytest.approx(-20.0)

    def test_needs_two_stages(self):
        with pytest.raises(ContractError):
            backward_transfer(_matrix([[90]]))


class TestAverageAccuracy:
    def test_final_row(self):
        assert average_accuracy(_matrix([[50], [55, 65], [60, 70, 80]])) == pytest.approx(70.0)

    def test_single_task(self):
        assert average_accuracy(_matrix([[63.0]])) == 63.0

    def test_all_zero(self):
        assert average_accuracy(_matrix([[0.0], [0.0, 0.0]])) == 0.0


class TestAccuracyMatrix:
    def test_lower_triangular_shape(self):
        m = AccuracyMatrix()
        m.add_stage([50.0], 50.0)
        with pytest.raises(ContractError):
            m.add_stage([50.0], 50.0)

    def test_range(self):
        with pytest.raises(ContractError):
            AccuracyMatrix().add_stage([101.0], 50.0)

    def test_accuracy_percent(self):
        assert accuracy(np.array([1, 2, 3, 4]), np.array([1, 2, 0, 4])) == 75.0
        assert accuracy(np.array([]), np.array([])) == 0.0
