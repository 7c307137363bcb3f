from config import build_config
from env_manager import EnvManager


def test_seed_override(monkeypatch):
    monkeypatch.setenv("VOXELPIPE_SEED", "7")
    config = build_config("reduced")
    overridden = EnvManager().apply_overrides(config)
    assert overridden.seed == 7
    assert overridden.voxel.rng_seed == 7
    assert config.seed == 0


def test_bad_integer_is_ignored(monkeypatch):
    monkeypatch.setenv("VOXELPIPE_SEED", "seven")
    monkeypatch.delenv("VOXELPIPE_THREADS", raising=False)
    manager = EnvManager()
    config = build_config("reduced")
    assert manager.apply_overrides(config) is config
    assert manager.resolve_threads() == 1


def test_thread_priority(monkeypatch):
    monkeypatch.setenv("VOXELPIPE_THREADS", "3")
    manager = EnvManager()
    assert manager.resolve_threads() == 3
    assert manager.resolve_threads(5) == 5
    assert manager.get_all_configs()["threads"] == 3
