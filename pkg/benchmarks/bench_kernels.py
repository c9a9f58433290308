"""Compiled vs numpy frontend kernels: per-call timings and end-to-end event rate.

    python benchmarks/bench_kernels.py [--events N]
"""

import argparse
import time
import timeit

import numpy as np

from eventvo import _kernels
from eventvo.frontend import Frontend, FrontendConfig
from eventvo.simgen import SyntheticScene, generate, render_events


def _per_call(mod, number):
    rng = np.random.default_rng(0)
    plane = np.where(rng.random((480, 640)) < 0.3, rng.random((480, 640)), -np.inf)
    table = np.full((480, 640), -1, dtype=np.int32)
    table[rng.integers(0, 480, 200), rng.integers(0, 640, 200)] = np.arange(200, dtype=np.int32)
    template = (rng.random((15, 15)) < 0.2).astype(np.uint8)
    votes = np.zeros(5, dtype=np.int64)
    cases = {
        "neighbor_lookup": lambda: mod.neighbor_lookup(table, 300, 200, 3),
        "harris_score": lambda: mod.harris_score(plane, 300, 200, 7, 30, 1.0, 0.15),
        "hypothesis_votes": lambda: mod.hypothesis_votes(template, 7, 2, -1, votes),
    }
    return {name: timeit.timeit(fn, number=number) / number * 1e6 for name, fn in cases.items()}


def _stream(n_events):
    scene = SyntheticScene(duration=1.0)
    data = generate(scene, seed=0)
    ev = render_events(data)
    return ev[:n_events], scene.camera


def _throughput(name, events, camera):
    fe = Frontend(camera.width, camera.height, FrontendConfig(kernels=name))
    t0 = time.perf_counter()
    for e in events:
        fe.ingest(e)
    dt = time.perf_counter() - t0
    return len(events) / dt, fe


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--events", type=int, default=50000)
    ap.add_argument("--number", type=int, default=2000)
    args = ap.parse_args(argv)
    backends = ["python"] + (["compiled"] if _kernels.compiled is not None else [])
    if len(backends) == 1:
        print("compiled kernels not built; timing the numpy versions only")

    print(f"{'kernel':<18}" + "".join(f"{b + ' (us)':>16}" for b in backends))
    rows = {b: _per_call(_kernels.get(b), args.number) for b in backends}
    for name in rows["python"]:
        print(f"{name:<18}" + "".join(f"{rows[b][name]:>16.2f}" for b in backends))

    events, camera = _stream(args.events)
    print(f"\nfrontend over {len(events)} synthetic events")
    tracks = {}
    for b in backends:
        rate, fe = _throughput(b, events, camera)
        tracks[b] = [(tr.id, tr.t.tolist(), tr.uv.tolist()) for tr in fe.finished + list(fe.active().values())]
        print(f"  {b:<9} {rate:>10.0f} events/s  ({fe.stats.detections} features)")
    if len(backends) == 2:
        print("  identical tracks:", tracks["python"] == tracks["compiled"])


if __name__ == "__main__":
    main()
