"""Command line driver.

Every verb reads one YAML config and works under a run directory named
after it: <root>/<run_name>/{world,stats,models,cycles,metrics,singleobs,
oracle}. Artifacts are immutable and stamped with the config hash, so any
verb refuses inputs produced by a different configuration.

Exit codes: 0 success, 1 usage or configuration error, 2 missing or
conflicting artifacts and other runtime failures.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

import cyclecast.cycler as C
import cyclecast.dataio as IO
import cyclecast.evalx as E
import cyclecast.fcmodel as F
import cyclecast.obsproc as OP
import cyclecast.satsim as S
import cyclecast.training as T
import cyclecast.world as W
from cyclecast.config import ConfigError, load_config
from cyclecast.damodel import DaNet, clone_net
from cyclecast.optim import AdamW
from cyclecast.state import StateNorm

FOREVER = 1e18


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---- Artifact plumbing ----

def _base(cfg, args) -> Path:
    return cfg.run_dir(args.root)


def _fresh(path):
    if Path(path).exists():
        raise IO.DataError(f"{path} already exists; artifacts are immutable,"
                           f" write into a fresh run directory")


def _check_hash(meta, cfg, what, path):
    got = meta.get("config_hash")
    if got != cfg.config_hash:
        raise IO.DataError(
            f"{what} at {path} was produced by config {str(got)[:12]}, but "
            f"the current config hashes to {cfg.config_hash[:12]}; "
            f"regenerate the artifact or restore the config")


def _load_world(cfg, base) -> W.WorldRun:
    path = base / "world"
    if not (path / "manifest.json").is_file():
        raise IO.DataError(f"no world dataset under {path}; "
                           f"run world-gen first")
    arrays, meta = IO.read_dataset(path)
    _check_hash(meta, cfg, "world dataset", path)
    states = {int(t): s for t, s in zip(arrays["times"], arrays["states"])}
    return W.WorldRun(cfg.world_params(), states)


def _load_stats(cfg, base) -> OP.NormStats:
    path = base / "stats"
    if not (path / "manifest.json").is_file():
        raise IO.DataError(f"no channel statistics under {path}; "
                           f"run obs-sim first")
    _, meta = IO.read_dataset(path)
    _check_hash(meta, cfg, "channel statistics", path)
    return OP.NormStats.from_dict(meta["stats"])


def _load_da(cfg, base) -> dict:
    path = base / "models" / "da.ckpt"
    if not path.is_file():
        raise IO.DataError(f"no assimilation checkpoint at {path}; "
                           f"run train-da first")
    ck = C.load_da_checkpoint(path)
    _check_hash(ck["meta"], cfg, "assimilation checkpoint", path)
    return ck


def _load_cascade(cfg, base) -> F.CascadeConfig:
    path = base / "models" / "cascade.ckpt"
    if not path.is_file():
        raise IO.DataError(f"no cascade checkpoint at {path}; "
                           f"run train-da first")
    return C.load_cascade_checkpoint(path)


def _load_cycles(cfg, base) -> C.RunDir:
    path = base / "cycles"
    if not (path / "manifest.json").is_file():
        raise IO.DataError(f"no cycle run under {path}; run cycle first")
    rd = C.RunDir(path)
    _check_hash(rd.manifest, cfg, "cycle run", path)
    return rd


def _check_cycle_span(run, t0, n_cycles, rollout_steps):
    t_last = t0 + (n_cycles - 1) * C.CADENCE_H
    lo = S.window_frames(t0)[0]
    hi = max(S.window_frames(t_last)[-1],
             t_last + C.CADENCE_H * max(1, rollout_steps))
    if lo < run.t_start or hi > run.t_end:
        raise IO.DataError(
            f"cycling needs truth over [{lo:g}, {hi:g}] h but the world run "
            f"spans [{run.t_start:g}, {run.t_end:g}] h; shorten the cycle "
            f"plan or regenerate a longer world")


def _fit_state_norm(cfg, run) -> StateNorm:
    a, b = cfg.data["training"]["train_span"]
    times = np.arange(a, b + 1e-9, 24.0)
    return StateNorm.from_samples([run.get_state(float(t)) for t in times])


# ---- Verbs ----

def _cmd_world_gen(cfg, args):
    base = _base(cfg, args)
    _fresh(base / "world")
    w = cfg.data["world"]
    params = cfg.world_params()
    run = W.WorldRun.generate(params, int(w["t_start"]), int(w["t_end"]))
    times = np.arange(int(w["t_start"]), int(w["t_end"]) + 1, dtype=np.int64)
    states = np.stack([run.get_state(float(t)).data.astype(np.float32)
                       for t in times])
    IO.write_dataset(base / "world", {"states": states, "times": times},
                     meta={"kind": "world", "config_hash": cfg.config_hash},
                     timestamp=False)
    g = params.grid
    return (f"world-gen: {len(times)} hourly states on {g.n_lat}x{g.n_lon}"
            f"x{len(g.levels)} -> {base / 'world'}")


def _cmd_obs_sim(cfg, args):
    base = _base(cfg, args)
    _fresh(base / "stats")
    run = _load_world(cfg, base)
    insts = cfg.instruments()
    hours = sorted({h for t0 in cfg.train_t0s for h in S.window_frames(t0)})
    tables = {i.inst_id: [S.simulate_hour_block(i, run, h, None)
                          for h in hours] for i in insts}
    stats = OP.compute_norm_stats(tables, {i.inst_id: i for i in insts},
                                  cfg.obsproc_params())
    IO.write_dataset(base / "stats", {},
                     meta={"kind": "obs-stats",
                           "config_hash": cfg.config_hash,
                           "stats": stats.to_dict(),
                           "version": stats.version},
                     timestamp=False)
    return (f"obs-sim: channel statistics from {len(hours)} hours x "
            f"{len(insts)} instruments (version {stats.version}) "
            f"-> {base / 'stats'}")


def _cmd_train_da(cfg, args):
    base = _base(cfg, args)
    models = base / "models"
    _fresh(models / "da.ckpt")
    _fresh(models / "cascade.ckpt")
    run = _load_world(cfg, base)
    stats = _load_stats(cfg, base)
    tr = cfg.data["training"]
    tcfg = cfg.train_config()
    sched = cfg.lr_schedule()
    norm = _fit_state_norm(cfg, run)

    fcfg = cfg.fc_config()
    short = F.FcModel(fcfg, seed=cfg.seed + 101)
    medium = F.FcModel(fcfg, seed=cfg.seed + 202)
    T.train_fc(short, run, norm, cfg.train_t0s, tr["fc_updates"], sched,
               seed=cfg.seed + 11)
    T.train_fc(medium, run, norm, cfg.train_t0s, tr["fc_updates"], sched,
               seed=cfg.seed + 12)
    cascade = F.CascadeConfig(k_handoff=cfg.data["cascade"]["k_handoff"],
                              short=short, medium=medium)

    all_t0s = sorted(set(cfg.train_t0s) | set(cfg.val_t0s))
    ds = T.build_da_dataset(run, cfg.instruments(), cfg.ro_params(), cascade,
                            norm, all_t0s, cfg.train_t0s, cfg.val_t0s,
                            pp=cfg.obsproc_params(), obs_stats=stats)
    net = DaNet(cfg.danet_config(), seed=cfg.seed + 303)
    n_lead = int(tcfg.stage1_max_lead_h // F.STEP_HOURS)
    val_leads = [0.0] + [F.STEP_HOURS * k for k in range(1, n_lead + 1)
                         if min(cfg.val_t0s) - F.STEP_HOURS * k >= run.t_start]
    v0 = T.evaluate_joint(net, short, ds, cfg.val_t0s, tcfg.t_joint,
                          leads=val_leads)
    opt, _ = T.train_da_stage(net, short, ds, tcfg, 1)
    if tcfg.stage2_updates:
        opt, _ = T.train_da_stage(net, short, ds, tcfg, 2, opt)
    if opt is None:
        opt = AdamW(net.params)
    v1 = T.evaluate_joint(net, short, ds, cfg.val_t0s, tcfg.t_joint,
                          leads=val_leads)

    models.mkdir(parents=True, exist_ok=True)
    C.save_da_checkpoint(models / "da.ckpt", net, opt, sched, norm, stats,
                         meta={"config_hash": cfg.config_hash,
                               "val_joint_initial": v0,
                               "val_joint_final": v1})
    C.save_cascade_checkpoint(models / "cascade.ckpt", cascade)
    total = tcfg.stage1_updates + tcfg.stage2_updates
    return (f"train-da: joint val loss {v0:.4f} -> {v1:.4f} after {total} "
            f"updates (fc pretrained {tr['fc_updates']}) -> {models}")


def _cmd_cycle(cfg, args):
    base = _base(cfg, args)
    _fresh(base / "cycles")
    run = _load_world(cfg, base)
    ck = _load_da(cfg, base)
    cascade = _load_cascade(cfg, base)
    cy = cfg.data["cycle"]
    _check_cycle_span(run, cy["t0"], cy["n_cycles"], cy["rollout_steps"])
    source = C.ObsSource(run, cfg.instruments(), cfg.ro_params(),
                         cfg.obsproc_params(), None, ck["obs_stats"])
    state = C.cold_start(cfg.grid(), cy["t0"], seed=cfg.seed)
    rd = C.RunDir.create(base / "cycles",
                         {"config_hash": cfg.config_hash, "t0": cy["t0"],
                          "n_cycles": cy["n_cycles"],
                          "rollout_steps": cy["rollout_steps"],
                          "rollout_every": cy["rollout_every"],
                          "arch_hash": ck["net"].cfg.arch_hash()})
    state, _, _ = C.run_cycles(state, cy["n_cycles"], source, ck["net"],
                               cascade, ck["state_norm"],
                               rollout_steps=cy["rollout_steps"],
                               rollout_every=cy["rollout_every"], run_dir=rd)
    C.save_cycle_checkpoint(base / "cycles" / "state.ckpt", state,
                            ck["net"].cfg.arch_hash())
    return (f"cycle: {cy['n_cycles']} cycles from t0={cy['t0']:g} h, "
            f"rollouts of {cy['rollout_steps']} steps every "
            f"{cy['rollout_every']} -> {base / 'cycles'}")


def _cmd_eval(cfg, args):
    base = _base(cfg, args)
    out = base / "metrics" / "eval.csv"
    _fresh(out)
    run = _load_world(cfg, base)
    rd = _load_cycles(cfg, base)
    ev = cfg.data["eval"]
    leads = ev["leads_h"]
    max_pos = int(round(max(leads) / C.CADENCE_H))
    if max_pos > rd.manifest["rollout_steps"]:
        raise IO.DataError(
            f"rollouts reach {rd.manifest['rollout_steps'] * C.CADENCE_H:g} "
            f"h of lead but eval.leads_h asks for {max(leads):g} h; rerun "
            f"cycle with more rollout_steps")
    idxs = [i for i in rd.list_rollouts() if i >= C.SPIN_UP_CYCLES]
    if not idxs:
        raise IO.DataError(
            f"no post-spin-up rollouts: all cycles fall inside the "
            f"{C.SPIN_UP_CYCLES}-cycle spin-up; run more cycles")

    forecasts = []
    t0s = []
    for i in idxs:
        seq = rd.read_rollout(i)
        t0s.append(seq[0].time_h)
        forecasts.append([seq[int(round(l / C.CADENCE_H))].data
                          for l in leads])
    forecasts = np.asarray(forecasts)
    es = E.EvalSet.against(run, t0s, leads)
    truths = np.asarray([[run.get_state(t0 + l).data for l in leads]
                         for t0 in t0s])
    clim = E.Climatology.from_run(run, hours=tuple(ev["clim_hours"]),
                                  span=tuple(ev["clim_span"]))
    grid = cfg.grid()
    series = [E.compute_metric(kind, forecasts, truths, es, grid, clim=clim,
                               model=cfg.run_name)
              for kind in E.METRIC_KINDS]
    series += [E.compute_metric("RMSE", forecasts, truths, es, grid,
                                region=reg, model=cfg.run_name)
               for reg in cfg.regions()]
    out.parent.mkdir(parents=True, exist_ok=True)
    E.write_metric_csv(out, series)
    n_rows = sum(len(s.rows) for s in series)
    return (f"eval: {n_rows} metric rows over {len(idxs)} cycles x "
            f"{len(leads)} leads -> {out}")


def _cmd_single_obs(cfg, args):
    base = _base(cfg, args)
    path = base / "singleobs" / args.tag
    _fresh(path)
    run = _load_world(cfg, base)
    ck = _load_da(cfg, base)
    cascade = _load_cascade(cfg, base)
    rd = _load_cycles(cfg, base)
    idxs = rd.list_analyses()
    idx = idxs[-1] if args.cycle_index is None else args.cycle_index
    if idx not in idxs:
        raise IO.DataError(f"cycle index {idx} not in the stored run "
                           f"(have {idxs[0]}..{idxs[-1]})")
    analysis = rd.read_analysis(idx)
    bg = F.rollout(cascade, analysis, 1, ck["state_norm"])[1]
    state = C.CycleState(analysis=analysis, background=bg, time_h=bg.time_h,
                         index=idx + 1)
    source = C.ObsSource(run, cfg.instruments(), cfg.ro_params(),
                         cfg.obsproc_params(), None, ck["obs_stats"])
    pert = E.ObsPerturbation(inst_id=args.instrument, channel=args.channel,
                             lat_deg=args.lat, lon_deg=args.lon,
                             magnitude_k=args.magnitude, patch=args.patch)
    inc = E.single_obs_test(state, source, ck["net"], ck["state_norm"], pert)
    radius = E.energy_radius(inc, args.lat, args.lon)
    IO.write_dataset(path, {"increment": inc.data},
                     meta={"config_hash": cfg.config_hash,
                           "instrument": args.instrument,
                           "channel": args.channel, "lat": args.lat,
                           "lon": args.lon, "magnitude_k": args.magnitude,
                           "patch": args.patch, "cycle_index": idx,
                           "time_h": bg.time_h, "radius_deg": radius},
                     timestamp=False)
    amax = float(np.abs(inc.data).max())
    return (f"single-obs: {args.instrument} ch{args.channel} "
            f"{args.magnitude:+g} K at ({args.lat:g}, {args.lon:g}): "
            f"|increment| max {amax:.3e}, 99% energy within "
            f"{radius:.2f} deg -> {path}")


def _cmd_denial(cfg, args):
    base = _base(cfg, args)
    out = base / "metrics" / f"denial-{args.deny}.csv"
    _fresh(out)
    run = _load_world(cfg, base)
    ck = _load_da(cfg, base)
    cascade = _load_cascade(cfg, base)
    rd = _load_cycles(cfg, base)
    idxs = rd.list_analyses()
    analyses = [rd.read_analysis(i) for i in idxs]
    state0 = C.cold_start(cfg.grid(), rd.manifest["t0"], seed=cfg.seed)
    control = E.ControlRun(state0=state0, analyses=analyses)
    source = C.ObsSource(run, cfg.instruments(), cfg.ro_params(),
                         cfg.obsproc_params(), None, ck["obs_stats"])
    protocols = list(E.DENIAL_PROTOCOLS) if args.protocol == "both" \
        else [args.protocol]
    series = [E.denial_experiment(p, args.deny, control, source, ck["net"],
                                  cascade, ck["state_norm"])
              for p in protocols]
    out.parent.mkdir(parents=True, exist_ok=True)
    E.write_metric_csv(out, series)
    parts = [f"{s.model}: {sum(1 for r in s.rows if r[4] > 0.0)}"
             f"/{len(s.rows)} degraded" for s in series]
    return f"denial: {', '.join(parts)} -> {out}"


def _cmd_finetune_short(cfg, args):
    base = _base(cfg, args)
    out = base / "models" / "cascade_ft.ckpt"
    _fresh(out)
    ck = _load_da(cfg, base)
    cascade = _load_cascade(cfg, base)
    rd = _load_cycles(cfg, base)
    analyses = [rd.read_analysis(i) for i in rd.list_analyses()]
    ft = cfg.data["finetune"]
    _, visits = T.finetune_short(cascade.short, analyses, ck["state_norm"],
                                 max_len=ft["max_len"],
                                 updates_per_stage=ft["updates_per_stage"],
                                 lr=ft["lr"], seed=cfg.seed + 7)
    C.save_cascade_checkpoint(out, cascade)
    lens = [l for l, _ in visits]
    return (f"finetune-short: rollout lengths {lens[0]}..{lens[-1]} x "
            f"{ft['updates_per_stage']} updates on {len(analyses)} "
            f"analyses -> {out}")


def _setting_name(flags):
    for k, v in E.ABLATION_SETTINGS.items():
        if v == flags:
            return f"setting-{k}"
    raise ValueError(f"no setting with flags {flags}")


def _cmd_ablate(cfg, args):
    base = _base(cfg, args)
    out = base / "metrics" / "ablation.csv"
    _fresh(out)
    run = _load_world(cfg, base)
    stats = _load_stats(cfg, base)
    ck = _load_da(cfg, base)
    cascade0 = _load_cascade(cfg, base)
    norm = ck["state_norm"]
    grid = cfg.grid()
    insts = cfg.instruments()
    ro = cfg.ro_params()
    pp = cfg.obsproc_params()
    tcfg = cfg.train_config()
    ab = cfg.data["ablate"]
    cy = cfg.data["cycle"]
    cad = C.CADENCE_H

    t0 = cy["t0"]
    spin_end = t0 + C.SPIN_UP_CYCLES * cad
    per_month = int(ab["month_hours"] / cad)
    n_eval = cy["n_cycles"]
    total = C.SPIN_UP_CYCLES + ab["months"] * per_month + n_eval
    _check_cycle_span(run, t0, total, 1)
    outages = None
    if ab["bias_instrument"]:
        outages = S.OutageSchedule(biases={
            ab["bias_instrument"]: [(spin_end, FOREVER, ab["bias_k"])]})
    source = C.ObsSource(run, insts, ro, pp, outages, stats)

    def run_setting(incremental, finetune):
        net = clone_net(ck["net"])
        cascade = F.clone_cascade(cascade0)
        buffer = T.ReplayBuffer()
        state = C.cold_start(grid, t0, seed=cfg.seed)
        state, archive, _ = C.run_cycles(state, C.SPIN_UP_CYCLES, source,
                                         net, cascade, norm)
        for m in range(ab["months"]):
            state, month, _ = C.run_cycles(state, per_month, source, net,
                                           cascade, norm)
            archive.extend(month)
            if incremental:
                m_t0s = [a.time_h for a in month]
                ds = T.build_da_dataset(run, insts, ro, cascade, norm,
                                        m_t0s, m_t0s, m_t0s[-1:], pp=pp,
                                        outages=outages, obs_stats=stats)
                T.incremental_update(net, cascade.short, ds, tcfg, buffer,
                                     f"month-{m:03d}", m_t0s,
                                     ab["updates_per_month"])
        if finetune:
            T.finetune_short(cascade.short, archive, norm,
                             max_len=ab["finetune_max_len"],
                             updates_per_stage=ab["finetune_updates_per_stage"],
                             lr=ab["finetune_lr"], seed=cfg.seed + 7)
        state, evals, _ = C.run_cycles(state, n_eval, source, net, cascade,
                                       norm)
        t0s = [a.time_h for a in evals]
        fcs = np.asarray([[a.data] for a in evals])
        truths = np.asarray([[run.get_state(t).data] for t in t0s])
        es = E.EvalSet.against(run, t0s, (0.0,))
        name = _setting_name({"incremental": incremental,
                              "finetune": finetune})
        return E.compute_metric("RMSE", fcs, truths, es, grid, model=name)

    settings = tuple(int(s) for s in args.settings.split(","))
    tables = E.ablation_matrix(run_setting, settings=settings)
    out.parent.mkdir(parents=True, exist_ok=True)
    E.write_metric_csv(out, list(tables.values()))
    means = {s: float(np.mean([r[4] for r in t.rows]))
             for s, t in tables.items()}
    summary = ", ".join(f"{s}: {v:.4f}" for s, v in means.items())
    return f"ablate: mean analysis RMSE by setting {{{summary}}} -> {out}"


def _cmd_oracle_var3d(cfg, args):
    base = _base(cfg, args)
    path = base / "oracle" / args.tag
    _fresh(path)
    grid = cfg.grid()
    b = E.gaussian_b(grid, args.sigma_b, args.length_deg)
    i, j = (int(x) for x in grid.cell_of(args.lat, args.lon))
    k = grid.flat_index(i, j)
    n = grid.n_lat * grid.n_lon
    h = np.zeros((1, n))
    h[0, k] = 1.0
    oracle = E.VarOracle(b=b, r_diag=np.array([args.sigma_o ** 2]), h=h,
                         background=np.zeros(n),
                         obs=np.array([args.innovation]))
    inc = E.var3d_increment(oracle)
    closed = args.sigma_b ** 2 / (args.sigma_b ** 2 + args.sigma_o ** 2) \
        * args.innovation
    IO.write_dataset(path, {"increment": inc.reshape(grid.n_lat,
                                                     grid.n_lon)},
                     meta={"config_hash": cfg.config_hash,
                           "sigma_b": args.sigma_b, "sigma_o": args.sigma_o,
                           "length_deg": args.length_deg, "lat": args.lat,
                           "lon": args.lon, "innovation": args.innovation,
                           "at_cell": float(inc[k]),
                           "closed_form": closed},
                     timestamp=False)
    return (f"oracle-var3d: increment at obs cell {inc[k]:.6f} "
            f"(closed form {closed:.6f}) -> {path}")


# ---- Parser ----

def build_parser() -> _Parser:
    parser = _Parser(prog="cyclecast",
                     description="Cyclic assimilation and forecast runs "
                                 "on a synthetic globe.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", required=True,
                       help="YAML run configuration")
        p.add_argument("--root", default=None,
                       help="run root (default: $CYCLECAST_RUNS or ./runs)")
        p.set_defaults(func=func)
        return p

    add("world-gen", _cmd_world_gen, "generate and store the nature run")
    add("obs-sim", _cmd_obs_sim, "derive observation channel statistics")
    add("train-da", _cmd_train_da,
        "pretrain forecast members and train the assimilation network")
    add("cycle", _cmd_cycle, "run the cyclic analysis/forecast chain")
    add("eval", _cmd_eval, "score stored rollouts against truth")

    p = add("single-obs", _cmd_single_obs,
            "increment response to one perturbed observation patch")
    p.add_argument("--instrument", required=True)
    p.add_argument("--channel", type=int, required=True)
    p.add_argument("--lat", type=float, required=True)
    p.add_argument("--lon", type=float, required=True)
    p.add_argument("--magnitude", type=float, required=True,
                   help="perturbation in kelvin")
    p.add_argument("--patch", type=int, default=5)
    p.add_argument("--cycle-index", type=int, default=None)
    p.add_argument("--tag", default="single-obs")

    p = add("denial", _cmd_denial,
            "re-run assimilation with one instrument withheld")
    p.add_argument("--deny", required=True, help="instrument id to withhold")
    p.add_argument("--protocol", default="both",
                   choices=("both",) + E.DENIAL_PROTOCOLS)

    add("finetune-short", _cmd_finetune_short,
        "curriculum fine-tune the short-range member on stored analyses")

    p = add("ablate", _cmd_ablate,
            "train/cycle the four incremental-vs-finetune variants")
    p.add_argument("--settings", default="1,2,3,4",
                   help="comma-separated subset of 1..4")

    p = add("oracle-var3d", _cmd_oracle_var3d,
            "closed-form single-observation 3D-Var increment")
    p.add_argument("--sigma-b", type=float, required=True)
    p.add_argument("--sigma-o", type=float, required=True)
    p.add_argument("--length-deg", type=float, required=True)
    p.add_argument("--lat", type=float, required=True)
    p.add_argument("--lon", type=float, required=True)
    p.add_argument("--innovation", type=float, required=True)
    p.add_argument("--tag", default="single-ob")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        cfg = load_config(args.config)
        summary = args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (IO.DataError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
