"""Smoke test for the mmprecode_py extension module.

Build the module and put it on the path first:

    cargo build --release -p mmprecode-py --features extension-module
    cp target/release/libmmprecode_py.so python/mmprecode_py.so
    python3 python/smoke_test.py
"""

import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import mmprecode_py as mp

TINY = """
seed = 4

[scene]
building_count = 3

[[scene.vehicles]]
has_gps = true
has_rgb = false
has_lidar = false

[[scene.vehicles]]
has_gps = true
has_rgb = false
has_lidar = true

[system]
n_v = 2
n_h = 4
k = 2
snr_db = 10.0
pilot_len = 4

[features.bev]
lx = 8
ly = 8
lz = 4

[model]
integration = [16]

[training]
epochs = 2
samples = 16
test_samples = 16

[sweep]
snr_db = [0.0, 20.0]
k = [1, 2]
samples = 4
wmmse_iterations = 20
"""


def main():
    cfg = mp.Config(TINY)
    cfg.validate()
    assert cfg.n == 8 and cfg.k == 2
    assert abs(cfg.noise_var - 0.1) < 1e-12
    assert mp.Config(cfg.to_toml()).hash() == cfg.hash()

    try:
        mp.Config("[system]\nbogus = 1\n")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    scene = mp.Scene.generate(cfg, 11)
    assert scene.num_vehicles == 2
    again = mp.Scene.from_bytes(scene.to_bytes())
    assert again.to_json() == scene.to_json()

    h = scene.channels(cfg, 3)
    assert len(h) == 2 and len(h[0]) == 8
    nv = cfg.noise_var
    r_mf = sum(mp.rates(h, mp.mf(h, 1.0), nv))
    r_zf = sum(mp.rates(h, mp.zf(h, 1.0), nv))
    r_w = sum(mp.rates(h, mp.wmmse(h, 1.0, nv), nv))
    assert r_w >= r_zf - 1e-12, (r_w, r_zf)
    power = sum(abs(z) ** 2 for col in mp.zf(h, 1.0) for z in col)
    assert abs(power - 1.0) < 1e-9

    snap = scene.snapshot(1, 0)
    assert snap["point_cloud"] is not None

    q = mp.Quantizer.for_column(8, 8, 0.5)
    v = [complex(0.05 * i, -0.025 * i) for i in range(8)]
    bits = q.encode(v)
    assert len(bits) == 2 * 8 * 8
    back = q.decode(bits, 8)
    assert all(abs(a - b) <= q.step for a, b in zip(v, back))

    coeffs = mp.beamspace(h[0])
    # Codewords have squared norm 1/N.
    energy = sum(abs(z) ** 2 for z in h[0]) / len(h[0])
    assert abs(sum(abs(c) ** 2 for c in coeffs) - energy) < 1e-9 * energy

    rows = mp.baselines(cfg, [1])
    assert len(rows) == 4
    assert all(r["wmmse"] >= r["zf"] for r in rows)

    upload, d1, d2 = mp.overhead(mp.Config())
    assert math.isclose(upload, 1050.0)

    rob = mp.robustness(cfg, ["none", "high"], [2])
    assert rob[0]["relative"] == 1.0

    print(f"ok: sum rates mf {r_mf:.3f} zf {r_zf:.3f} wmmse {r_w:.3f}; overhead D1 {d1:.2f} KiB")


if __name__ == "__main__":
    main()
