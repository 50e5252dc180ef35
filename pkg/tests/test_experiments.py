import numpy as np

from hymoerec.data import synthetic_memorization
from hymoerec.experiments import directional_ablation, ml1m_subset


def fake_ratings(path, n_users=30, n_items=12, per_user=8, seed=0):
    rng = np.random.default_rng(seed)
    lines = []
    for u in range(1, n_users + 1):
        for k, item in enumerate(rng.choice(n_items, size=per_user, replace=False)):
            lines.append(f"{u}::{item + 1}::4::{1000 * u + k}")
    path.write_text("\n".join(lines) + "\n")
    return path


def test_subset_takes_first_users_in_file_order(tmp_path):
    split = ml1m_subset(fake_ratings(tmp_path / "ratings.dat", n_items=8), n_users=10)
    assert split.users == sorted(str(u) for u in range(1, 11))
    assert all(len(split.full_sequence(u)) == 8 for u in range(split.n_users))


def test_directional_ablation_smoke(tmp_path):
    split = synthetic_memorization(n_users=16, n_items=30, min_len=6, max_len=9, seed=1)
    res = directional_ablation(split, tmp_path, seeds=(0, 1), d_model=8, n_layers=1, max_len=8,
                               epochs=2, eval_every=1, batch_size=8)
    assert len(res.hymoe_hr10) == len(res.uniform_hr10) == 2
    assert all(0.0 <= v <= 1.0 for v in res.hymoe_hr10 + res.uniform_hr10)
    assert res.passed == (res.hymoe_mean >= res.uniform_mean - 0.002)
    assert (tmp_path / "uniform-seed1" / "best.ckpt").exists()
