"""Training runs: plain block versus each gate versus both.

A reduced budget (1024 samples, 12 epochs, about a minute per variant on one
core). All variants sit on a loss plateau near ln 4 for the first few hundred
steps before breaking out; orderings at this scale are anecdotal.

    python demos/toy_comparison.py
"""

from dsynergy.toy import ToyConfig, evaluate, gen_dataset, train

data, val = gen_dataset(7, 1024), gen_dataset([7, 1], 256)

variants = {
    "plain": ToyConfig(use_dsg=False, use_msg=False),
    "dsg": ToyConfig(use_msg=False),
    "msg": ToyConfig(use_dsg=False),
    "dsg+msg": ToyConfig(),
}

print(f"{'variant':<8} {'loss0':>7} {'loss':>7} {'val':>6}")
results = {}
for name, cfg in variants.items():
    results[name] = res = train(cfg, data, epochs=12, seed=7, val=val)
    first, last = res.metrics.records[0], res.metrics.records[-1]
    print(f"{name:<8} {first.loss:7.4f} {last.loss:7.4f} {last.val_acc:6.3f}", flush=True)

# %% confusion counts of the full model (rows: true class)
print(evaluate(results["dsg+msg"].params, val, variants["dsg+msg"]).confusion)
