import math, time, json, sys
import numpy as np
from rdar.trainer import TrainerConfig, train
from rdar.evaluation import held_out_corpus, run_scenarios, aggregate

out = sys.argv[1] if len(sys.argv) > 1 else "/tmp/probe_run4"
over = json.loads(sys.argv[2]) if len(sys.argv) > 2 else {}
base = dict(learning_rate=1e-3, lambda_entropy=0.02, k_min=2, k_max=6,
            batch_size=4, total_steps=3000, checkpoint_every=1000,
            architecture="full_scene", seed=0)
base.update(over)
cfg = TrainerConfig(**base)
t0 = time.time()
res = train(cfg, out)
print(f"train {cfg.total_steps} updates: {(time.time()-t0)/60:.1f} min", flush=True)
lines = [json.loads(l) for l in open(res.log_path)]
for w in (lines[:50], lines[-50:]):
    print("window reward %.2f coll %.3f critic %.1f" % (
        np.mean([l["mean_episode_reward"] for l in w]),
        np.mean([l["collision_rate"] for l in w]),
        np.mean([l["critic"] for l in w])), flush=True)
corpus = held_out_corpus(per_template=100)
ref = run_scenarios(corpus, "none", math.inf)
r0 = aggregate(ref, "none", math.inf)
print(f"none: coll={r0.collisions_pct:.2f}%", flush=True)
for k in (2, 4, 8, 16):
    res_k = run_scenarios(corpus, "rdar", k, res.final_params)
    r = aggregate(res_k, "rdar", k, ref)
    print(f"rdar    k={k}: coll={r.collisions_pct:.2f}% prog={r.progress_ratio:.3f}", flush=True)
for k in (2, 4, 8, 16):
    res_k = run_scenarios(corpus, "closest", k)
    r = aggregate(res_k, "closest", k, ref)
    print(f"closest k={k}: coll={r.collisions_pct:.2f}% prog={r.progress_ratio:.3f}", flush=True)
res_r = run_scenarios(corpus, "random", 4)
r = aggregate(res_r, "random", 4, ref)
print(f"random  k=4: coll={r.collisions_pct:.2f}% prog={r.progress_ratio:.3f}", flush=True)
