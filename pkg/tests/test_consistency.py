import numpy as np
import pandas as pd
import pytest

from spkadapt.adapt import PartitionSet, PartitionType, evaluate
from spkadapt.corpus import generate
from spkadapt.models.gmm import fit_gmm
from spkadapt.models.ivector import collect_stats, extract_ivectors, train_tv

from .utils import small_model, small_spec, small_splits

@pytest.mark.parametrize("seed", [0, 7, 21])
def test_consistency_across_calls(seed):
    """Test that the same seed gives the same corpus, UBM and i-vectors"""
    results = []
    for _ in range(2):
        corpus = generate(small_spec(seed=seed))
        features = list(corpus.features("train").values())
        frames = np.vstack([f.frames for f in features])
        ubm = fit_gmm(frames, 2, iterations=3, seed=seed)
        tv = train_tv(ubm, collect_stats(ubm, features), rank=2, iterations=2, seed=seed)
        ivectors = extract_ivectors(tv, features)
        results.append((corpus.records("train"), ubm, np.stack([iv.values for iv in ivectors.values()])))

    (records, first_ubm, first_ivs), (records_again, second_ubm, second_ivs) = results
    pd.testing.assert_frame_equal(records, records_again, check_dtype=True)
    assert first_ubm.fingerprint() == second_ubm.fingerprint()
    assert np.array_equal(first_ivs, second_ivs)

def test_evaluation_is_repeatable():
    _, test = small_splits()
    m = small_model(input_dim=6, seed=2)
    speakers = PartitionSet.from_records(test.records, PartitionType.SPEAKER)
    first = evaluate(m, test.features, test.labels, group_by=speakers)
    second = evaluate(m, test.features, test.labels, group_by=speakers)
    assert first.overall == second.overall
    pd.testing.assert_frame_equal(first.per_partition, second.per_partition, check_dtype=True)
