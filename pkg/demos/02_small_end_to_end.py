"""Generate a small corpus, train both classifiers, evaluate and explain.

Runs in well under a minute. The same steps at full size are what
``lmdetect pipeline`` does, with every artifact written to disk.
"""

import numpy as np

from lmdetect import FEATURE_NAMES, featurize_columnar, gbdt, mlp
from lmdetect.dataset import assemble, fit_train_encoding, split_by_user
from lmdetect.evaluation import evaluate, threshold_sweep
from lmdetect.explain import explain_global, explain_local, sample_background
from lmdetect.synth import SynthConfig, generate

cfg = SynthConfig(seed=3, n_users=200, n_machine_accounts=20, n_computers=400, n_servers=40, days=14,
                  n_chains=20, max_malicious_fraction=0.01)
corpus = generate(cfg)
print(f"corpus: {corpus.n_auth} auth, {corpus.n_proc} proc, {corpus.n_malicious} attack lines")

res = featurize_columnar(list(corpus.iter_auth_lines()), list(corpus.iter_proc_lines()),
                         list(corpus.iter_redteam_lines()))
table = res.table
print(f"features: {len(table)} remote logons, {int(table.labels().sum())} malicious")

manifest = split_by_user(table, 0.8, seed=1)
enc = fit_train_encoding(table, manifest)
train, test = assemble(table, manifest, standardize=True, encoding=enc)
print(f"split: {len(train)} train rows / {len(test)} test rows")

# the tree model uses raw features, the network the standardized ones
raw_train, raw_test = train.table.feature_matrix(), test.table.feature_matrix()
tree = gbdt.train(raw_train, train.y, gbdt.GbdtConfig(n_trees=50), enc)
net = mlp.train(train.X, train.y, mlp.MlpConfig(epochs=30), train.standardization, enc)

scorers = {"gbdt": tree.predict_proba, "mlp": net.score_raw}
for name, score in scorers.items():
    s = score(raw_test)
    r = evaluate(s, test.y)
    print(f"{name}: recall={r.recall:.3f} fpr={r.fpr:.2e} (tp={r.true_positives}, fp={r.false_positives})")
    for rep in threshold_sweep(s, test.y, [0.1, 0.5, 0.9]):
        print(f"    threshold {rep.threshold:.1f}: recall {rep.recall:.3f}, fpr {rep.fpr:.2e}")

bg = sample_background(raw_train, 256, seed=0)
flagged = np.flatnonzero(tree.predict_proba(raw_test) > 0.5)
if len(flagged):
    i = flagged[0]
    a = explain_local(tree.predict_proba, raw_test[i], bg, int(test.event_ids[i]))
    print(f"why event {a.event_id} was flagged (f(x)={a.fx:.3f}, base={a.base_value:.3f}):")
    for j in np.argsort(-np.abs(a.phi))[:4]:
        print(f"    {FEATURE_NAMES[j]:26s} value={raw_test[i, j]:<10g} phi={a.phi[j]:+.4f}")

# benign rows mostly score like the background, so mix in the flagged ones
rows = np.unique(np.r_[flagged, np.random.default_rng(0).choice(len(raw_test), 16, replace=False)])
g = explain_global(tree.predict_proba, raw_test[rows], bg)
print(f"global importance over {len(rows)} rows (mean |phi|):")
for name, v in g.ranked()[:4]:
    print(f"    {name:26s} {v:.4f}")
