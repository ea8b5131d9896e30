"""
命令行模块
simulate / fit / diagnose / summarize / correlations / predict-marginals / tetrachoric
"""

import argparse
import logging
import os
import queue
import sys
import threading
import time

import numpy as np
import pandas as pd

from dyadprobit import __version__
from dyadprobit.analysis import (
    correlation_decomposition,
    intra_cluster_summary,
    predicted_marginal_probabilities,
    predicted_marginals_draw_wise,
    tetrachoric_matrix,
)
from dyadprobit.chain_store import ChainStoreManager
from dyadprobit.clusters import build_couple_clusters
from dyadprobit.config import parse_config
from dyadprobit.data_model import read_dataset
from dyadprobit.diagnostics import (
    acceptance_report,
    flag_psrf,
    format_table,
    running_means_frame,
    summarize,
)
from dyadprobit.errors import DyadProbitError, ValidationError
from dyadprobit.levels import parse_levels
from dyadprobit.sampler import ModelDesign, run_chain
from dyadprobit.simulate import simulate_dataset, write_simulation

logger = logging.getLogger(__name__)

MODEL_LEVELS = {"two": ("u",), "three": ("u", "v", "w")}


def _write_csv(frame, directory, name):
    if not os.path.exists(directory):
        os.makedirs(directory)
    path = os.path.join(directory, name)
    frame.to_csv(path, index=False, float_format="%.6f", encoding="utf-8")
    logger.info("已写入 %s", path)
    return path


def _chain_worker(jobs, results, spec, design, progress):
    """工作线程：从任务队列取链编号，结果放入结果队列"""
    while True:
        try:
            chain = jobs.get_nowait()
        except queue.Empty:
            return
        try:
            results.put(("done", chain, run_chain(spec, design, chain=chain, progress=progress)))
        except Exception as e:
            results.put(("error", chain, e))


def run_chains(spec, design, threads=1, progress=False, on_chain=None):
    """在线程池上运行全部链；on_chain 在调度线程内逐条调用（唯一写者）"""
    jobs = queue.Queue()
    for chain in range(spec.n_chains):
        jobs.put(chain)
    results = queue.Queue()
    workers = [
        threading.Thread(target=_chain_worker, args=(jobs, results, spec, design, progress), daemon=True)
        for _ in range(min(threads, spec.n_chains))
    ]
    for worker in workers:
        worker.start()

    stores, errors = {}, []
    for _ in range(spec.n_chains):
        status, chain, payload = results.get()
        if status == "error":
            logger.error("链 %d 失败: %s", chain, payload)
            errors.append(payload)
            continue
        stores[chain] = payload
        if on_chain is not None:
            on_chain(payload)
    for worker in workers:
        worker.join()
    if errors:
        raise errors[0]
    return [stores[c] for c in range(spec.n_chains)]


def command_fit(config):
    """拟合：写出每条链的抽样与运行清单"""
    dataset = read_dataset(config.data_path)
    if config.outcomes:
        dataset = dataset.select_outcomes(config.outcomes)
    spec = config.model_spec(dataset.R, dataset.P)
    index = build_couple_clusters(dataset)
    design = ModelDesign.from_dataset(dataset, index, spec.levels)

    manager = ChainStoreManager(config.out_dir)
    progress = config.threads == 1 and config.verbosity in ("DEBUG", "INFO")
    started = time.time()
    stores = run_chains(spec, design, config.threads, progress, on_chain=manager.save_chain)
    wall_time = time.time() - started

    flagged = []
    if spec.n_chains >= 2 and spec.n_stored >= 2:
        flagged = flag_psrf(summarize(stores), config.psrf_threshold)
    manager.save_manifest(spec, {
        "data_path": os.path.abspath(config.data_path),
        "outcome_labels": dataset.outcome_labels,
        "covariate_labels": dataset.covariate_labels,
        "n_rows": dataset.n_rows,
        "n_individuals": dataset.n,
        "n_clusters": index.n_clusters,
        "threads": config.threads,
        "wall_time": round(wall_time, 3),
        "psrf_threshold": config.psrf_threshold,
        "psrf_warning": flagged,
        "version": __version__,
    })
    logger.info("拟合完成: %d 条链，用时 %.1f 秒，结果位于 %s", len(stores), wall_time, config.out_dir)
    return 0


def command_simulate(config):
    """模拟：写出 data.csv 与 truth.csv"""
    scenario = config.scenario()
    dataset, _, _ = simulate_dataset(scenario)
    write_simulation(scenario, dataset, config.out_dir)
    return 0


def _load(config):
    manifest, stores = ChainStoreManager(config.chains_dir).load_chains()
    return manifest, stores, config.out_dir or config.chains_dir


def _with_labels(frame, manifest):
    """把参数名中的结果序号换成结果列名，便于阅读"""
    labels = manifest.get("outcome_labels")
    if labels:
        frame.insert(1, "outcomes", [_outcome_names(name, labels) for name in frame["parameter"]])
    return frame


def _outcome_names(name, labels):
    parts = name.split("_")
    if name.startswith("B_"):
        return labels[int(parts[1]) - 1]
    return ":".join(labels[int(p) - 1] for p in parts[-2:])


def command_diagnose(config):
    """收敛诊断：PSRF、累计均值与接受率"""
    manifest, stores, out_dir = _load(config)
    summary = summarize(stores)
    flagged = flag_psrf(summary, config.psrf_threshold)
    diagnostics = summary[["parameter", "mean", "sd", "q2.5", "q97.5", "psrf", "excludes_zero"]]
    _write_csv(diagnostics, out_dir, "diagnostics.csv")
    _write_csv(running_means_frame(stores), out_dir, "running_means.csv")
    acceptance = acceptance_report(stores)
    _write_csv(acceptance, out_dir, "acceptance.csv")

    print(format_table(diagnostics))
    if not acceptance.empty:
        print()
        print(format_table(acceptance))
    if flagged:
        print(f"\nPSRF > {config.psrf_threshold}: {', '.join(flagged)}")
    return 0


def command_summarize(config):
    """后验汇总表"""
    manifest, stores, out_dir = _load(config)
    summary = _with_labels(summarize(stores), manifest)
    _write_csv(summary, out_dir, "summary.csv")
    print(format_table(summary))
    return 0


def _manifest_dataset(config, manifest):
    path = config.data_path or manifest.get("data_path")
    if not path:
        raise ValidationError("需要 --data 或运行清单中的数据路径")
    dataset = read_dataset(path)
    labels = manifest.get("outcome_labels")
    if labels and labels != dataset.outcome_labels:
        dataset = dataset.select_outcomes(labels)
    return dataset


def command_correlations(config):
    """调整后相关、未调整四分相关与分量分解"""
    manifest, stores, out_dir = _load(config)
    levels = parse_levels(manifest["spec"]["levels"])
    if levels != MODEL_LEVELS[config.model]:
        raise ValidationError(f"链的层次 {','.join(levels)} 与 --model {config.model} 不一致", key="model")
    labels = manifest.get("outcome_labels")
    decomposition = correlation_decomposition(stores, labels)
    _write_csv(decomposition, out_dir, "decomposition.csv")
    _write_csv(intra_cluster_summary(stores, labels), out_dir, "intra_cluster.csv")

    overall = decomposition[decomposition["component"] == "overall"].set_index("pair")
    table = pd.DataFrame({
        "pair": overall.index,
        "adjusted_mean": overall["mean"].to_numpy(),
        "adjusted_sd": overall["sd"].to_numpy(),
    })
    try:
        unadjusted = tetrachoric_matrix(_manifest_dataset(config, manifest)).set_index("pair")["rho"]
        table.insert(1, "unadjusted", table["pair"].map(unadjusted))
    except (ValidationError, OSError) as e:
        logger.warning("无法计算未调整的四分相关: %s", e)
        table.insert(1, "unadjusted", np.nan)
    _write_csv(table, out_dir, "correlations.csv")
    print(format_table(table, digits=3))
    return 0


def command_predict_marginals(config):
    """固定某一协变量取值时的预测边际概率"""
    manifest, stores, out_dir = _load(config)
    dataset = _manifest_dataset(config, manifest)
    if manifest.get("covariate_labels") and manifest["covariate_labels"] != dataset.covariate_labels:
        raise ValidationError("数据的协变量列与拟合时不一致")
    if not config.values:
        raise ValidationError("需要 --values", key="values")

    records = []
    for value in config.values:
        plug_in = predicted_marginal_probabilities(stores, dataset, config.covariate, value)
        mean, sd = predicted_marginals_draw_wise(stores, dataset, config.covariate, value)
        for r, label in enumerate(dataset.outcome_labels):
            records.append({
                "covariate": config.covariate,
                "value": value,
                "outcome": label,
                "probability": plug_in[r],
                "drawwise_mean": mean[r],
                "drawwise_sd": sd[r],
            })
    table = pd.DataFrame(records)
    _write_csv(table, out_dir, "marginals.csv")
    print(format_table(table, digits=3))
    return 0


def command_tetrachoric(config):
    """未调整的四分相关矩阵"""
    dataset = read_dataset(config.data_path)
    table = tetrachoric_matrix(dataset)
    if config.out_dir:
        _write_csv(table, config.out_dir, "tetrachoric.csv")
    print(format_table(table))
    return 0


COMMAND_HANDLERS = {
    "fit": command_fit,
    "simulate": command_simulate,
    "diagnose": command_diagnose,
    "summarize": command_summarize,
    "correlations": command_correlations,
    "predict-marginals": command_predict_marginals,
    "tetrachoric": command_tetrachoric,
}


def dispatch(config):
    """运行命令并返回退出码"""
    try:
        return COMMAND_HANDLERS[config.command](config)
    except DyadProbitError as e:
        logger.error("%s 失败 [%s]: %s", config.command, type(e).__name__, e)
        return e.exit_code
    except OSError as e:
        logger.error("%s 失败 [文件错误]: %s", config.command, e)
        return ValidationError.exit_code


def build_parser():
    parser = argparse.ArgumentParser(prog="dyadprobit", description="纵向二元面板数据的多元随机效应 probit 模型贝叶斯估计")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", dest="config_path", default=None, help="config.ini 路径")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true", help="输出调试日志")
    common.add_argument("-q", "--quiet", action="store_true", help="只输出警告与错误")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", parents=[common], help="拟合模型")
    fit.add_argument("--data", dest="data_path", required=True)
    fit.add_argument("--out", dest="out_dir", required=True)
    fit.add_argument("--chains", type=int, default=None)
    fit.add_argument("--iterations", type=int, default=None)
    fit.add_argument("--burn-in", type=int, default=None)
    fit.add_argument("--levels", default=None, help="two / three 或层次名称列表")
    fit.add_argument("--outcomes", nargs="+", default=None, help="只拟合这些结果列")

    simulate = sub.add_parser("simulate", parents=[common], help="生成模拟数据")
    simulate.add_argument("--out", dest="out_dir", required=True)

    for name, help_text in (("diagnose", "收敛诊断"), ("summarize", "后验汇总")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--chains", dest="chains_dir", required=True)
        p.add_argument("--out", dest="out_dir", default=None)
        p.add_argument("--psrf-threshold", type=float, default=None)

    corr = sub.add_parser("correlations", parents=[common], help="调整后相关与分量分解")
    corr.add_argument("--chains", dest="chains_dir", required=True)
    corr.add_argument("--model", choices=sorted(MODEL_LEVELS), required=True)
    corr.add_argument("--data", dest="data_path", default=None)
    corr.add_argument("--out", dest="out_dir", default=None)

    pm = sub.add_parser("predict-marginals", parents=[common], help="预测边际概率")
    pm.add_argument("--chains", dest="chains_dir", required=True)
    pm.add_argument("--data", dest="data_path", required=True)
    pm.add_argument("--covariate", required=True)
    pm.add_argument("--values", type=float, nargs="+", required=True)
    pm.add_argument("--out", dest="out_dir", default=None)

    tet = sub.add_parser("tetrachoric", parents=[common], help="未调整的四分相关")
    tet.add_argument("--data", dest="data_path", required=True)
    tet.add_argument("--out", dest="out_dir", default=None)
    return parser


def config_from_args(args):
    """命令行参数 -> RunConfig"""
    overrides = {
        "General.seed": args.seed,
        "General.threads": args.threads,
        "fit.n_chains": getattr(args, "chains", None) if args.command == "fit" else None,
        "fit.n_iterations": getattr(args, "iterations", None),
        "fit.burn_in": getattr(args, "burn_in", None),
        "fit.levels": getattr(args, "levels", None),
        "diagnose.psrf_threshold": getattr(args, "psrf_threshold", None),
    }
    if args.verbose:
        overrides["General.verbosity"] = "DEBUG"
    elif args.quiet:
        overrides["General.verbosity"] = "WARNING"
    paths = {
        key: getattr(args, key)
        for key in ("data_path", "out_dir", "chains_dir", "outcomes", "covariate", "model")
        if getattr(args, key, None) is not None
    }
    if getattr(args, "values", None):
        paths["values"] = list(args.values)
    return parse_config(args.command, args.config_path, overrides, **paths)


def main(argv=None):
    """命令行入口"""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = config_from_args(args)
    except DyadProbitError as e:
        logger.error("配置错误: %s", e)
        return e.exit_code
    logging.getLogger().setLevel(config.verbosity)
    return dispatch(config)


if __name__ == "__main__":
    sys.exit(main())
