"""Command line: ``run`` the pipeline, ``synth`` fixtures, ``eval`` an estimate.

Exit codes: 0 success, 2 configuration error, 3 input parse error,
4 estimation divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import queue
import sys
import threading
import time
from pathlib import Path

import numpy as np

from . import io_eval
from .estimator.core import Estimator, densify
from .estimator.solver import EstimationDivergence
from .frontend import Frontend
from .simgen import generate, render_events, snapshot_stream

log = logging.getLogger("eventvo")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARSE = 3
EXIT_DIVERGED = 4

QUEUE_CAPACITY = 1024
_DONE = object()


class Pipeline:
    """Frontend feeding the estimator through a bounded FIFO of track snapshots.

    With ``threads=1`` the estimator consumes each snapshot as soon as it is
    produced.  With ``threads=2`` a producer thread runs the frontend and the
    calling thread runs the estimator.  Both modes deliver the same snapshots
    in the same order, so the estimate is identical.
    """

    def __init__(self, cfg: io_eval.PipelineConfig, threads=1):
        if threads not in (1, 2):
            raise ValueError("threads must be 1 or 2")
        self.cfg = cfg
        self.threads = threads
        self.camera = cfg.camera.model()
        self.estimator = Estimator(self.camera, cfg.estimator)
        self.frontend = None
        self.n_snapshots = 0

    # -- sources ------------------------------------------------------------------
    def _event_source(self, events):
        def produce(emit):
            self.frontend = fe = Frontend(self.camera.width, self.camera.height, self.cfg.frontend, sink=emit)
            for e in events:
                fe.ingest(e)
            fe.flush()
        return produce

    @staticmethod
    def _track_source(tracks):
        def produce(emit):
            for _, snap in snapshot_stream(tracks):
                emit(snap)
        return produce

    # -- drivers ------------------------------------------------------------------
    def _consume(self, snap):
        self.n_snapshots += 1
        self.estimator.process(snap)

    def _run_single(self, produce):
        produce(self._consume)

    def _run_threaded(self, produce):
        q = queue.Queue(maxsize=QUEUE_CAPACITY)
        stop = threading.Event()
        failure = []

        def emit(snap):
            # block while full (backpressure); give up only if the consumer died
            while not stop.is_set():
                try:
                    q.put(snap, timeout=0.1)
                    return
                except queue.Full:
                    continue

        def producer():
            try:
                produce(emit)
            except BaseException as exc:  # handed to the consumer thread
                failure.append(exc)
            finally:
                while not stop.is_set():
                    try:
                        q.put(_DONE, timeout=0.1)
                        break
                    except queue.Full:
                        continue

        th = threading.Thread(target=producer, name="frontend", daemon=True)
        th.start()
        try:
            while True:
                item = q.get()
                if item is _DONE:
                    break
                self._consume(item)
        finally:
            stop.set()
            th.join()
        if failure:
            raise failure[0]

    def run(self, events=None, tracks=None):
        if (events is None) == (tracks is None):
            raise ValueError("give exactly one of events or tracks")
        produce = self._event_source(events) if events is not None else self._track_source(tracks)
        start = time.perf_counter()
        if self.threads == 1:
            self._run_single(produce)
        else:
            self._run_threaded(produce)
        self.estimator.finish()
        self.runtime = time.perf_counter() - start
        return self

    # -- results ------------------------------------------------------------------
    def trajectory(self):
        return densify(self.estimator.trajectory(), self.cfg.export.rate_hz)

    def metrics(self):
        est = self.estimator
        s = est.stats
        m = {
            "runtime_s": float(self.runtime),
            "snapshots": self.n_snapshots,
            "initialized": est.initialized,
            "solves": len(s.solve_times),
            "max_window": max(s.window_sizes, default=0),
            "mean_window": float(np.mean(s.window_sizes)) if s.window_sizes else 0.0,
            "max_factors": max(s.factor_counts, default=0),
            "forced_knots": s.forced_knots,
            "landmarks": len(est.landmarks()),
        }
        if self.frontend is not None:
            fs = self.frontend.stats
            m.update(events=fs.events, rejected_events=fs.rejected, features=fs.detections,
                     max_cell_accesses=fs.max_cell_accesses)
        return m


# -- subcommands --------------------------------------------------------------------

def _load_config(path):
    return io_eval.read_config(path) if path else io_eval.PipelineConfig()


def cmd_run(args):
    cfg = _load_config(args.config)
    if args.delta is not None:
        cfg = dataclasses.replace(cfg, eval=io_eval.EvalConfig(args.delta, cfg.eval.association_window))
    if (args.events is None) == (args.tracks is None):
        raise io_eval.ConfigError("run needs exactly one of --events or --tracks")
    try:
        if args.events is not None:
            events, tracks = io_eval.read_events(args.events, strict=args.strict), None
        else:
            events, tracks = None, io_eval.read_tracks(args.tracks, strict=args.strict)
        gt = io_eval.read_groundtruth(args.gt, strict=args.strict) if args.gt else None
    except OSError as exc:
        raise io_eval.ParseError(exc.filename, 0, "", exc.strerror or str(exc)) from exc

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pipe = Pipeline(cfg, threads=args.threads)
    try:
        pipe.run(events=events, tracks=tracks)
    except EstimationDivergence as exc:
        (out / "divergence.json").write_text(json.dumps(exc.dump, indent=1))
        raise

    states = pipe.trajectory()
    io_eval.write_trajectory(out / "trajectory.txt", states)
    io_eval.write_landmarks(out / "landmarks.txt", pipe.estimator.landmarks())
    if pipe.frontend is not None:
        io_eval.write_tracks(out / "tracks.txt", pipe.frontend.finished)
    metrics = pipe.metrics()
    if gt is not None and len(states) >= 3:
        t = np.array([s.t for s in states])
        poses = np.array([s.pose for s in states])
        try:
            r = io_eval.evaluate(t, poses, *gt, delta=cfg.eval.delta, max_dt=cfg.eval.association_window)
        except ValueError as exc:
            log.warning("evaluation skipped: %s", exc)
        else:
            metrics.update(rms_rte=r["rms_rte"], ate=r["ate"], scale=r["scale"],
                           path_length=r["path_length"], delta=r["delta"])
            print(f"rms_rte {r['rms_rte']:.6g}\nate {r['ate']:.6g}")
    io_eval.write_metrics(out / "metrics.ini", metrics)
    if not pipe.estimator.initialized:
        log.warning("estimator never initialized; trajectory is empty")
    return EXIT_OK


def cmd_synth(args):
    cfg = _load_config(args.config)
    scene = dataclasses.replace(cfg.scene, camera=cfg.camera.model())
    data = generate(scene, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t = np.array([s.t for s in data.states])
    io_eval.write_groundtruth(out / "groundtruth.txt", t, np.array([s.pose for s in data.states]))
    io_eval.write_tracks(out / "tracks.txt", data.tracks)
    io_eval.write_landmarks(out / "landmarks_gt.txt", dict(enumerate(data.landmarks)))
    (out / "config.ini").write_text(io_eval.format_config(cfg))
    if not args.no_events:
        io_eval.write_events(out / "events.txt", render_events(data, rate=args.event_rate, per_pixel=args.events_per_pixel))
    print(f"wrote {len(data.tracks)} tracks for {len(data.landmarks)} landmarks to {out}")
    return EXIT_OK


def cmd_eval(args):
    try:
        est = io_eval.read_trajectory(args.estimate)
        t_gt, gt = io_eval.read_groundtruth(args.gt, strict=args.strict)
    except OSError as exc:
        raise io_eval.ParseError(exc.filename, 0, "", exc.strerror or str(exc)) from exc
    if len(est) < 3:
        raise io_eval.ParseError(args.estimate, 0, "", "need at least 3 poses")
    t = np.array([s.t for s in est])
    poses = np.array([s.pose for s in est])
    r = io_eval.evaluate(t, poses, t_gt, gt, delta=args.delta)
    print(f"rms_rte {r['rms_rte']:.6g}\nate {r['ate']:.6g}\nscale {r['scale']:.6g}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="eventvo", description="Continuous-time event-camera visual odometry.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the pipeline on an event (or track) file")
    r.add_argument("--config")
    src = r.add_mutually_exclusive_group()
    src.add_argument("--events", help="event file: t x y p")
    src.add_argument("--tracks", help="feature tracks (id t x y); bypasses the frontend")
    r.add_argument("--gt", help="ground truth for evaluation")
    r.add_argument("--out", required=True)
    r.add_argument("--delta", type=float, help="RTE pose-pair spacing in seconds")
    r.add_argument("--strict", action="store_true", help="fail on the first malformed line")
    r.add_argument("--threads", type=int, choices=(1, 2), default=1)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("synth", help="generate a synthetic sequence")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--event-rate", type=float, default=20.0, help="baseline events per second per corner pixel")
    s.add_argument("--events-per-pixel", type=float, default=2.0,
                   help="events per corner pixel per pixel of motion")
    s.add_argument("--no-events", action="store_true", help="skip rendering the event file")
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="SIM(3)-aligned RMS RTE and ATE of an estimate")
    e.add_argument("estimate")
    e.add_argument("--gt", required=True)
    e.add_argument("--delta", type=float, default=0.5)
    e.add_argument("--strict", action="store_true")
    e.set_defaults(func=cmd_eval)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except io_eval.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except io_eval.ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except EstimationDivergence as exc:
        print(f"estimation diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        # malformed content that parsed line-by-line but is inconsistent as a whole
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
