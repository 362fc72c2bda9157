import pytest

from semshield import data


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """A 2000-sample stratified corpus shared across the session."""
    root = tmp_path_factory.mktemp("corpus")
    spec = data.DatasetSpec(num_samples=2000, num_categories=16, seed=7)
    data.generate_dataset(spec, root)
    return root


@pytest.fixture(scope="session")
def corpus_samples(corpus_dir):
    return data.load_manifest(corpus_dir / "manifest.jsonl")
