"""Inside the operator policy: edge-masked attention, masked heads, decoder.

Cluster rows attend over their member agents and over their selected target,
so the per-cluster embeddings carry the live topology. Four sequential heads
pick the rewiring action; an attention decoder reconstructs the raw node
representations as an auxiliary loss.
"""

import numpy as np

from coopgraph import build_targets, init_params, layout_for, random_topology
from coopgraph.env import PrimitiveSet, config_for_task, reset
from coopgraph.graph import action_masks
from coopgraph.policy import act, encode, latent, node_batch, reconstruct, value

cfg = config_for_task("CSI-12/2/3", n_bases=2)
targets = build_targets(cfg.primitive_set, True, cfg.m_invaders, cfg.n_bases)
rng = np.random.default_rng(3)
graph = random_topology(rng, cfg.n_agents, 6, targets)
params = init_params(layout_for(graph, cfg), rng)
state = reset(cfg, rng)

batch = node_batch(graph, state, cfg)
print("network inputs:")
print("  agent rows    ", batch.obs.shape, "(raw observations)")
print("  target rows   ", batch.target_reps.shape, "(one-hot moves / command descriptors)")
print("  cluster rows  : one-hot, built into the parameters")

e_h = encode(batch, params)
z = latent(e_h, params)
print(f"\nper-cluster embeddings e_h {e_h.shape} -> shared latent z {z.shape}")
print(f"critic value: {float(value(z, params).data[0]):+.4f}")

masks = action_masks(graph)
decision = act(batch, masks, params, np.random.default_rng(0))
print(f"\nsampled operator action: {decision.action.as_tuple()}")
print(f"  per-head log-probs {decision.log_probs.round(2)}  entropies {decision.entropy.round(2)}")
print(f"  op1 respected the nonempty-cluster mask: {bool(masks.cluster_mask[decision.action.src_cluster])}")

agent_hat, cluster_hat, target_hat, l_ae = reconstruct(e_h, batch, params)
print(f"\ndecoder reconstructions: agents {agent_hat.shape}, clusters {cluster_hat.shape}, "
      f"targets {target_hat.shape}")
print(f"reconstruction loss at init: {float(l_ae.data):.4f}")

# greedy mode is deterministic, used for evaluation
again = act(batch, masks, params, None, mode="argmax")
assert again.action == act(batch, masks, params, None, mode="argmax").action
print("\nargmax decisions are reproducible:", again.action.as_tuple())
