import pytest

from fedcrfd.config import ConfigError, dump_config, from_tables, load_config, parse_overrides


def test_defaults():
    rc = load_config()
    f = rc.federation_for()
    assert (f.rounds, f.local_epochs, f.batch_size, f.lr) == (50, 2, 16, 1e-4)
    assert (f.mu1, f.mu2, f.mu3) == (0.01, 0.01, 0.01)
    assert rc.data.masks == ["uniform_1d:5", "random_2d:3"] and rc.data.beta == 0.1
    assert f.num_clients == 2 and rc.data.size == 64


def test_file_and_overrides(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('[data]\nbeta = 0.02\n[federation]\nmeasure = "l2"\nchannels = [4, 8, 16]\n')
    rc = load_config(path, ["federation.rounds=3", "data.masks=[\"cartesian_1d:4\", \"radial_2d:4\"]", "federation.measure=cosine"])
    assert rc.data.beta == 0.02 and rc.federation.rounds == 3
    assert rc.federation.measure == "cosine"
    assert rc.federation.arch.channels == (4, 8, 16)
    assert rc.data.masks == ["cartesian_1d:4", "radial_2d:4"]


@pytest.mark.parametrize("tables", [
    {"data": {"colour": 1}},
    {"extra": {}},
    {"federation": {"mu1": "high"}},
    {"federation": {"rounds": 1.5}},
    {"federation": {"mu2": -1.0}},
    {"data": {"masks": ["uniform_1d:5"]}},
    {"data": {"masks": ["zigzag:2", "random_2d:3"]}},
    {"data": {"size": 60}},
    {"data": {"beta": 0.9}},
    {"run": {"seeds": [1, 1]}},
    {"federation": {"measure": "hamming"}},
    {"federation": {"use_fusion": 1}},
])
def test_rejections(tables):
    with pytest.raises(ConfigError):
        from_tables(tables)


def test_bad_override_syntax():
    with pytest.raises(ConfigError):
        parse_overrides(["rounds=3"])


def test_unparseable_file(tmp_path):
    (tmp_path / "bad.toml").write_text("[data\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.toml")


def test_dump_round_trip(tmp_path):
    rc = load_config(None, ["federation.mu3=0.5", "data.modalities=[0, 1, 2]", 'data.masks=["uniform_1d:5","random_2d:3","radial_2d:4"]'])
    (tmp_path / "d.toml").write_text(dump_config(rc))
    assert load_config(tmp_path / "d.toml") == rc
