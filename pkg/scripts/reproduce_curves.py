import os, sys, pathlib
import pandas as pd
from tqdm import tqdm

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "app"))

from baselines import train_offpolicy
from config import load_config
from mappo_trainer import build_agent, evaluate, train
from env_core import GridWorld
from logger import EventLog
from persistence import write_csv

# ------------------
# Config (env first)
# ------------------
CONFIG = os.getenv("CURVES_CONFIG", "configs/desk.yaml")
OUT_DIR = pathlib.Path(os.getenv("CURVES_OUT", "runs/curves"))
EPOCHS = os.getenv("CURVES_EPOCHS")
SEEDS = [int(s) for s in os.getenv("CURVES_SEEDS", "0,1,2").split(",")]
WINDOW = int(os.getenv("CURVES_SMOOTH", "20"))
WEIGHT_SETS = [(0.1, 0.4, 0.5), (0.1, 0.6, 0.3)]
ALGORITHMS = ["mappo", "vdn", "qmix"]


# ------------------
# Helpers
# ------------------
def tag(weights):
    return "w" + "-".join(f"{w:g}" for w in weights)


def run_one(algorithm, weights, seed, out):
    overrides = [f"scenario.weights=[{', '.join(map(str, weights))}]", f"training.algorithm={algorithm}"]
    if EPOCHS:
        overrides.append(f"training.epochs={EPOCHS}")
    cfg = load_config(CONFIG, overrides, seed)
    events = EventLog(out / "events.jsonl")
    if algorithm == "mappo":
        metrics = train(cfg.scenario, cfg.training, events=events).metrics
    else:
        metrics = train_offpolicy(cfg.scenario, cfg.training, cfg.baseline, algorithm, events=events).metrics
    return cfg, metrics


def summarize(metrics, algorithm, weights, seed):
    tail = metrics.tail(WINDOW)
    return {
        "weights": tag(weights), "algorithm": algorithm, "seed": seed,
        "final_smoothed_reward": tail["mean_reward"].mean(),
        "final_total_aou": tail["total_aou"].mean(),
        "final_data_collected_bits": tail["data_collected_bits"].mean(),
    }


# ------------------
# Main
# ------------------
def main():
    rows = []
    jobs = [(w, s, a) for w in WEIGHT_SETS for s in SEEDS for a in ALGORITHMS]
    for weights, seed, algorithm in tqdm(jobs, desc="curves"):
        out = OUT_DIR / tag(weights) / f"seed{seed}"
        cfg, metrics = run_one(algorithm, weights, seed, out)
        write_csv(metrics, out / f"{algorithm}_metrics.csv")
        rows.append(summarize(metrics, algorithm, weights, seed))
        if algorithm == ALGORITHMS[-1]:
            world = GridWorld(cfg.scenario)
            rand = evaluate(build_agent(world, cfg.training).actor, world, cfg.training.eval_episodes,
                            "uniform", seed=seed).summary()
            rows.append({"weights": tag(weights), "algorithm": "random", "seed": seed,
                         "final_smoothed_reward": rand["mean_reward"],
                         "final_total_aou": rand["mean_total_aou"],
                         "final_data_collected_bits": rand["mean_data_collected_bits"]})
    summary = pd.DataFrame(rows)
    write_csv(summary, OUT_DIR / "summary.csv")
    print(f"Wrote {len(summary)} summary rows → {OUT_DIR / 'summary.csv'}")


if __name__ == "__main__":
    main()
