"""A guided tour of the library API on a small world.

1. synthesize speakers and train a compact speaker-embedding net;
2. push a handful of trials around with the iterative sign-gradient attack;
3. pretrain a small purifier and watch scores move back as it is cascaded.

Runs in about a minute on one CPU core.  Usage: python demos/attack_and_purify.py
"""

import numpy as np

from asvdefense import asv, metrics
from asvdefense import attack as A
from asvdefense import filters as F
from asvdefense import recon as R
from asvdefense import synthdata as sd

corpus = sd.make_corpus(n_speakers=10, train_per_speaker=10, eval_per_speaker=8, T=48, seed=1,
                        train_speakers=40, session_sigma=0.6)
trials = sd.make_trials(corpus.eval, 100, 100, seed=1)
net, losses = asv.train_asv(corpus.train, asv.ASVConfig(n_speakers=40, epochs=10), seed=0)
print(f"speaker net: training loss {losses[0]:.3f} -> {losses[-1]:.3f}")

adv = A.attack_trialset(A.make_victim(net), trials, corpus.eval, A.AttackConfig(epsilon=0.3, n_iters=5))
clean_tests = np.stack([corpus.eval[i].features for i in trials.test])
print(f"perturbation stays in the ball: max |adv - clean| = {np.abs(adv.test_features - clean_tests).max():.3f}")

purifier, _ = R.pretrain_recon(corpus.train, R.AlterationPolicy(), R.ReconConfig(steps=300, d_model=16, heads=2,
                                                                               layers=2, ff_dim=32), seed=0)
print(f"purifier held-out L1: {R.reconstruction_l1(purifier, corpus.eval):.3f}")


def eer_with(defense, tests=None):
    scores = asv.eval_trials(asv.ASVPipeline(net, defense), trials, corpus.eval, tests)
    return metrics.eer(metrics.ScoredTrials(scores, trials.target))


print("\ndefense              clean EER   adversarial EER")
rows = [("none", [])] + [(f"{k} x purifier", [R.Cascade(purifier, k)]) for k in (1, 2, 4)]
rows += [(s.name, [F.FilterStage(s)]) for s in (F.FilterSpec("gaussian", 3, 1.0), F.FilterSpec("median", 3))]
for name, chain in rows:
    print(f"{name:<20} {eer_with(chain):8.1f}%   {eer_with(chain, adv.test_features):8.1f}%")
