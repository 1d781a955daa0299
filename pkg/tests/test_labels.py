import numpy as np
import pytest

from esci_rank.labels import (
    DEFAULT_GAINS,
    ESCI_PRIORS,
    EsciLabel,
    as_label_vector,
    check_gains,
    check_label_vector,
    one_hot,
)


class TestEsciLabel:
    def test_order_and_indices(self):
        assert [l.value for l in EsciLabel] == ["E", "S", "C", "I"]
        assert [l.index for l in EsciLabel] == [0, 1, 2, 3]
        for i in range(4):
            assert EsciLabel.from_index(i).index == i

    @pytest.mark.parametrize("text,expected", [
        ("E", EsciLabel.EXACT), ("s", EsciLabel.SUBSTITUTE), ("complement", EsciLabel.COMPLEMENT),
        (" Irrelevant ", EsciLabel.IRRELEVANT),
    ])
    def test_parse(self, text, expected):
        assert EsciLabel.parse(text) is expected

    def test_parse_rejects_unknown(self):
        with pytest.raises(ValueError, match="'X'"):
            EsciLabel.parse("X")

    def test_each_label_has_its_own_gain(self):
        gains = [DEFAULT_GAINS[l.index] for l in EsciLabel]
        assert len(set(gains)) == 4


class TestLabelVectors:
    def test_one_hot(self):
        np.testing.assert_array_equal(one_hot(EsciLabel.COMPLEMENT), [0, 0, 1, 0])

    def test_priors_are_a_distribution(self):
        check_label_vector(np.array(ESCI_PRIORS), tol=1e-12)

    @pytest.mark.parametrize("bad", [[0.5, 0.5, 0.1, 0.0], [1.2, -0.2, 0, 0], [0.25] * 3, [np.nan, 0, 0, 1]])
    def test_rejects_invalid(self, bad):
        with pytest.raises(ValueError):
            as_label_vector(bad)

    def test_sum_tolerance(self):
        as_label_vector([0.5, 0.5 + 5e-10, 0.0, 0.0])
        with pytest.raises(ValueError):
            as_label_vector([0.5, 0.5 + 5e-9, 0.0, 0.0])

    def test_gains_must_not_increase(self):
        check_gains(DEFAULT_GAINS)
        with pytest.raises(ValueError):
            check_gains([0.1, 1.0, 0.01, 0.0])
