"""The scripted baseline and the team-scaling transfer mechanics.

The hand-written operator policy assigns one intercept cluster per invader
and backstops threatened bases; it validates that the default physics admit
high success. Transfer doubles the team by turning each agent node into a
group node and surgically adding a merge-attention block, inheriting every
other parameter bit-exact.
"""

import numpy as np

from coopgraph import extend, init_params, layout_for, surgery_for_extension
from coopgraph.runner import cmd_oracle, frozen_topology, build_env_config, parse_run_config
from coopgraph.training import evaluate_policy

rc = parse_run_config({
    "task": "CSI-12/2/3", "n_clusters": 6,
    "env": {"n_bases": 2}, "eval_episodes": 40, "seeds": [0],
})
result = cmd_oracle(rc)
print(f"scripted oracle on CSI-12/2/3: success {result['success']:.2f} "
      f"over {result['episodes']} episodes")

# --- scaling the team -------------------------------------------------------
env_small = build_env_config(rc)
graph = frozen_topology(rc, env_small, seed=0)
params = init_params(layout_for(graph, env_small), np.random.default_rng(5))

big_graph = extend(graph, fan_out=2)
print(f"\nextend: {graph.n_agents} agents -> {big_graph.n_env_agents} agents "
      f"in {big_graph.n_agents} fixed groups; clusters/targets unchanged")

big_params = surgery_for_extension(params, fan_out=2, rng=np.random.default_rng(6))
inherited = all(
    np.array_equal(big_params.tensors[k].data, t.data) for k, t in params.tensors.items()
)
added = sorted(set(big_params.tensors) - set(params.tensors))
print(f"surgery: inherited tensors bit-exact = {inherited}; new block = {added}")

rc_big = parse_run_config({
    "task": "CSI-24/4/3", "n_clusters": 6,
    "env": {"n_bases": 2}, "eval_episodes": 10, "seeds": [0],
})
env_big = build_env_config(rc_big)
zs = evaluate_policy(big_graph, big_params, env_big, seed=0, episodes=10)
print(f"\nuntrained zero-shot success on the doubled task: {zs:.2f}")
print("(a trained source policy transfers its operator skills; see the")
print(" transfer subcommand for the full zero-shot + retraining protocol)")
