import numpy as np
import pytest
from scipy.stats import spearmanr

from mcr.errors import CalibrationError, DimensionError, ParameterError
from mcr.sampling import (DENSITY_FLOOR, DensityParams, default_params, density_profile,
                          exclusion_radius, generate_mask, load_mask, load_mask_dir, mask_bank,
                          normalized_radius, save_mask)


@pytest.mark.parametrize(
    "R, k_r, d",
    [(2, 0.14, 5), (5, 0.14, 5), (10, 0.14, 5), (20, 0.10, 9), (30, 0.10, 10), (40, 0.10, 15), (50, 0.06, 20)],
)
def test_default_table(R, k_r, d):
    p = default_params(R)
    assert (p.k_r, p.d, p.target_R) == (k_r, d, R)


def test_params_validation():
    with pytest.raises(ParameterError):
        DensityParams(0.0, 5, 10)
    with pytest.raises(ParameterError):
        DensityParams(0.6, 5, 10)
    with pytest.raises(ParameterError):
        DensityParams(0.1, 0, 10)
    with pytest.raises(ParameterError):
        DensityParams(0.1, 5, 0.5)


def test_density_boundaries():
    p = default_params(10)
    assert density_profile(0.0, p) == 1.0
    assert density_profile(p.k_r, p) == 1.0
    assert density_profile(1.0, p, scale=1.0) == pytest.approx(DENSITY_FLOOR)


def test_density_high_R_decreases():
    p = default_params(50)
    assert density_profile(0.5, p) < density_profile(0.2, p)


def test_density_monotone():
    p = default_params(30)
    r = np.linspace(0, 1, 501)
    assert np.all(np.diff(density_profile(r, p, scale=3.0)) <= 0)


def test_density_rejects_out_of_range():
    with pytest.raises(ParameterError):
        density_profile(1.2, default_params(10))
    with pytest.raises(ParameterError):
        density_profile(-0.1, default_params(10))


def test_normalized_radius_geometry():
    r = normalized_radius(64, 32)
    assert r[32, 16] == 0.0
    assert r[32, 0] == pytest.approx(1.0)
    assert r.max() == 1.0


def test_unit_acceleration_is_full():
    m = generate_mask(64, 64, default_params(1), seed=0)
    assert m.bits.all() and m.achieved_R == 1.0


def test_R10_mask_256():
    m = generate_mask(256, 256, default_params(10), seed=11)
    assert 9.5 <= m.achieved_R <= 10.5
    assert m.achieved_R == pytest.approx(m.bits.size / m.bits.sum())
    r = normalized_radius(256, 256)
    assert m.bits[r <= 0.14].all()
    assert m.bits[128, 128]


def test_determinism_and_seed_dependence():
    p = default_params(20)
    a = generate_mask(128, 128, p, seed=5)
    b = generate_mask(128, 128, p, seed=5)
    c = generate_mask(128, 128, p, seed=6)
    np.testing.assert_array_equal(a.bits, b.bits)
    assert np.count_nonzero(a.bits != c.bits) > 0


def test_odd_dimensions():
    with pytest.raises(DimensionError):
        generate_mask(63, 64, default_params(10), 0)


def test_unreachable_target_reports_best():
    # a calibration disc of radius 0.5 alone already samples ~20% of the grid
    with pytest.raises(CalibrationError) as exc:
        generate_mask(64, 64, DensityParams(0.5, 2, 40), seed=0)
    assert exc.value.best_R is not None and exc.value.best_R < 40


def test_min_distance_outside_calibration():
    p = default_params(20)
    m = generate_mask(128, 128, p, seed=2)
    r = normalized_radius(128, 128)
    rho = exclusion_radius(density_profile(r, p, m.scale))
    ys, xs = np.nonzero(m.bits & (r > p.k_r))
    pts = np.stack([ys, xs], 1).astype(float)
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    local = rho[ys, xs]
    pair_local = np.minimum(local[:, None], local[None, :])
    assert np.all(d >= 0.5 * pair_local)


def test_radial_density_decreases_over_bank():
    p = default_params(10)
    bank = mask_bank(128, 128, p, count=20, base_seed=100)
    mean = np.mean([m.bits for m in bank], axis=0)
    r = normalized_radius(128, 128)
    edges = np.linspace(p.k_r, 1.0, 12)
    centers, dens = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (r > lo) & (r <= hi)
        centers.append(0.5 * (lo + hi))
        dens.append(mean[sel].mean())
    assert spearmanr(centers, dens).statistic < 0


def test_bank_properties():
    p = default_params(10)
    bank = mask_bank(64, 64, p, count=10, base_seed=40)
    assert [m.seed for m in bank] == list(range(40, 50))
    for i in range(10):
        for j in range(i + 1, 10):
            assert np.count_nonzero(bank[i].bits != bank[j].bits) >= 1
    assert mask_bank(64, 64, p, count=1, base_seed=40)[0] == generate_mask(64, 64, p, 40)


def test_bank_rejects_empty():
    with pytest.raises(ParameterError):
        mask_bank(64, 64, default_params(10), 0, 0)


def test_bank_annotates_failing_index():
    with pytest.raises(CalibrationError, match="mask 0"):
        mask_bank(64, 64, DensityParams(0.5, 2, 40), 2, 0)


def test_mask_file_round_trip(tmp_path):
    m = generate_mask(32, 48, default_params(5), seed=9)
    save_mask(m, tmp_path, "m000")
    raw = (tmp_path / "m000.mask.bin").read_bytes()
    assert len(raw) == 32 * 48 and set(raw) <= {0, 1}
    back = load_mask(tmp_path / "m000.mask.bin")
    assert back == m and back.achieved_R == m.achieved_R
    assert load_mask_dir(tmp_path, target_R=5)[0] == m
    assert load_mask_dir(tmp_path, target_R=10) == []
