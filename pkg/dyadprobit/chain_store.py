"""
链存储模块
保存稀疏化后的后验抽样、Metropolis 接受计数与步长轨迹，并读写链目录
"""

import io
import json
import logging
import os
from datetime import datetime

import numpy as np
import pandas as pd

from dyadprobit.errors import ValidationError
from dyadprobit.state import ModelSpec, ParameterState

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


class ChainStore:
    """单条链的后验抽样"""

    def __init__(self, spec, chain, names=None, draws=None):
        self.spec = spec
        self.chain = chain
        self.seed = spec.seed + chain
        self.names = names or ParameterState.parameter_names(spec.R, spec.P, spec.levels)
        self.draws = [np.asarray(d, dtype=float) for d in (draws or [])]
        n_coords = spec.R * (spec.R - 1) // 2
        self.accepted = np.zeros(n_coords, dtype=int)
        self.proposed = 0
        self.burn_in_accepted = np.zeros(n_coords, dtype=int)
        self.burn_in_proposed = 0
        self.gamma_trace = []
        self.final_gamma = None

    def __len__(self):
        return len(self.draws)

    def append(self, params):
        """追加一个参数状态"""
        self.draws.append(params.to_vector())

    def record_acceptance(self, accepted, burn_in=False):
        """累计 rho_e 各坐标的接受次数"""
        if burn_in:
            self.burn_in_accepted += np.asarray(accepted, dtype=int)
            self.burn_in_proposed += 1
        else:
            self.accepted += np.asarray(accepted, dtype=int)
            self.proposed += 1

    def record_gamma(self, iteration, gamma):
        self.gamma_trace.append((int(iteration), [float(g) for g in gamma]))

    def rejection_rates(self):
        """冻结步长后的各坐标拒绝率"""
        if self.proposed == 0:
            return np.full(self.accepted.size, np.nan)
        return 1.0 - self.accepted / self.proposed

    def matrix(self):
        """抽样矩阵 (抽样数, 参数数)"""
        if not self.draws:
            return np.empty((0, len(self.names)))
        return np.vstack(self.draws)

    def column(self, name):
        """某一参数的抽样序列"""
        return self.matrix()[:, self.names.index(name)]

    def states(self):
        """逐个还原为 ParameterState"""
        for vector in self.draws:
            yield ParameterState.from_vector(vector, self.spec.R, self.spec.P, self.spec.levels)

    def to_frame(self):
        frame = pd.DataFrame(self.matrix(), columns=self.names)
        frame.insert(0, "draw", np.arange(1, len(self.draws) + 1))
        return frame

    def metadata(self):
        """Metropolis 计数与步长轨迹"""
        return {
            "chain": self.chain,
            "seed": self.seed,
            "accepted": self.accepted.tolist(),
            "proposed": self.proposed,
            "burn_in_accepted": self.burn_in_accepted.tolist(),
            "burn_in_proposed": self.burn_in_proposed,
            "gamma_trace": self.gamma_trace,
            "final_gamma": None if self.final_gamma is None else [float(g) for g in self.final_gamma],
        }

    def load_metadata(self, data):
        self.accepted = np.asarray(data.get("accepted", []), dtype=int)
        self.proposed = int(data.get("proposed", 0))
        self.burn_in_accepted = np.asarray(data.get("burn_in_accepted", []), dtype=int)
        self.burn_in_proposed = int(data.get("burn_in_proposed", 0))
        self.gamma_trace = [(int(it), list(g)) for it, g in data.get("gamma_trace", [])]
        final = data.get("final_gamma")
        self.final_gamma = None if final is None else np.asarray(final, dtype=float)


def pooled_matrix(stores):
    """合并多条链的抽样"""
    return np.vstack([store.matrix() for store in stores])


def pooled_states(stores):
    for store in stores:
        yield from store.states()


def posterior_mean_state(stores):
    """后验均值处的参数状态"""
    spec = stores[0].spec
    return ParameterState.from_vector(pooled_matrix(stores).mean(axis=0), spec.R, spec.P, spec.levels)


def write_draws(path, names, rows, header):
    """写出抽样 CSV：注释头（spec_hash、seed 等）+ 平面数值行"""
    frame = pd.DataFrame(np.atleast_2d(rows), columns=names)
    frame.insert(0, "draw", [int(d) for d in header.pop("draw_index", range(1, len(frame) + 1))])
    with open(path, "w", encoding="utf-8", newline="") as f:
        for key, value in header.items():
            f.write(f"# {key}={value}\n")
        frame.to_csv(f, index=False, float_format=FLOAT_FORMAT)


def read_draws(path):
    """读取抽样 CSV，返回 (注释头字典, DataFrame)"""
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    lines = text.splitlines(keepends=True)
    header = {}
    body_start = 0
    for body_start, line in enumerate(lines):
        if not line.startswith("#"):
            break
        key, _, value = line[1:].strip().partition("=")
        header[key.strip()] = value.strip()
    try:
        frame = pd.read_csv(io.StringIO("".join(lines[body_start:])), float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ValidationError(f"{path}: 无法解析抽样文件: {e}")
    return header, frame


class ChainStoreManager:
    """链目录管理类：每条链一个 CSV 与一个元数据 JSON，外加运行清单"""

    MANIFEST = "manifest.json"

    def __init__(self, chains_dir):
        self.chains_dir = chains_dir
        if not os.path.exists(self.chains_dir):
            os.makedirs(self.chains_dir)

    def chain_path(self, chain):
        return os.path.join(self.chains_dir, f"chain_{chain}.csv")

    def metadata_path(self, chain):
        return os.path.join(self.chains_dir, f"chain_{chain}.json")

    def save_chain(self, store):
        """保存一条链"""
        header = {"spec_hash": store.spec.spec_hash(), "seed": store.seed, "chain": store.chain}
        write_draws(self.chain_path(store.chain), store.names, store.matrix(), header)
        with open(self.metadata_path(store.chain), "w", encoding="utf-8") as f:
            json.dump(store.metadata(), f, ensure_ascii=False, indent=2)
        logger.info("链 %d 已保存: %s（%d 个抽样）", store.chain, self.chain_path(store.chain), len(store))

    def save_manifest(self, spec, extra=None):
        """保存运行清单"""
        manifest = {
            "spec": spec.to_dict(),
            "spec_hash": spec.spec_hash(),
            "seed": spec.seed,
            "created_at": datetime.now().isoformat(),
        }
        manifest.update(extra or {})
        with open(os.path.join(self.chains_dir, self.MANIFEST), "w", encoding="utf-8") as f:
            json.dump(manifest, f, ensure_ascii=False, indent=2)
        return manifest

    def load_manifest(self):
        path = os.path.join(self.chains_dir, self.MANIFEST)
        if not os.path.exists(path):
            raise ValidationError(f"链目录缺少运行清单: {path}")
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)

    def load_chains(self):
        """加载目录中的全部链"""
        manifest = self.load_manifest()
        spec = ModelSpec.from_dict(manifest["spec"])
        stores = []
        for chain in range(spec.n_chains):
            path = self.chain_path(chain)
            if not os.path.exists(path):
                raise ValidationError(f"缺少链文件: {path}")
            header, frame = read_draws(path)
            if header.get("spec_hash") != spec.spec_hash():
                raise ValidationError(f"{path}: spec_hash 与运行清单不一致")
            names = [c for c in frame.columns if c != "draw"]
            store = ChainStore(spec, chain, names=names, draws=list(frame[names].to_numpy()))
            if os.path.exists(self.metadata_path(chain)):
                with open(self.metadata_path(chain), "r", encoding="utf-8") as f:
                    store.load_metadata(json.load(f))
            stores.append(store)
        logger.info("已从 %s 加载 %d 条链", self.chains_dir, len(stores))
        return manifest, stores
