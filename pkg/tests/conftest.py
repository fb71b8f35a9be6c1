import time

import pytest

from springcam import experiment as ex


@pytest.fixture(scope="session")
def manifest():
    return ex.ExperimentManifest()


@pytest.fixture(scope="session")
def trained(manifest):
    """Tiny-profile network trained on the default pooled training set."""
    t0 = time.perf_counter()
    seqs = ex.training_sequences(manifest)
    report = ex.train_network(seqs, manifest)
    return report, time.perf_counter() - t0


@pytest.fixture(scope="session")
def trials(manifest):
    return ex.trial_sequences(manifest)


@pytest.fixture(scope="session")
def weights(trained, tmp_path_factory):
    path = tmp_path_factory.mktemp("net") / "dfn.json"
    trained[0].result.net.save(path)
    return path
