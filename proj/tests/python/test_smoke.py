import math

import numpy as np
import pytest

import advvae


def small_matrix():
    ratings, users = advvae.generate_synthetic(users=60, items=24, seed=3)
    options = advvae.PreprocessOptions()
    options.min_user_degree = 3
    options.min_item_degree = 3
    return advvae.matrix_from_text(ratings, users, options=options)


def test_metrics():
    assert advvae.ndcg_at_k([0, 1, 2], [0], 3) == pytest.approx(1.0)
    assert advvae.recall_at_k([3, 4, 0], [0, 1], 2) == 0.0
    assert advvae.balanced_accuracy([0] * 9 + [1], [0] * 10) == pytest.approx(0.5)
    r = advvae.wilcoxon([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert r["p_value"] == 1.0 and not r["significant"]
    assert advvae.mcnemar([True, False], [True, False])["p_value"] == 1.0


def test_dataset_and_folds():
    m = small_matrix()
    assert m.users > 0 and m.items > 0 and m.nnz > 0
    folds = advvae.make_folds(m, 3, 1)
    assert len(folds) == 3
    x = m.dense_rows(folds[0].test_users)
    assert set(np.unique(x)) <= {0.0, 1.0}


def test_model_infer_and_checkpoint():
    cfg = advvae.ModelConfig()
    cfg.items = 8
    cfg.encoder_hidden = [6]
    cfg.latent = 3
    cfg.adversary_hidden = [4]
    cfg.adversarial = True
    p = advvae.ModelParameters.initialize(cfg, 5)
    x = np.zeros((2, 8))
    x[0, 1] = x[1, 3] = 1.0
    out = p.infer(x)
    assert out["mu"].shape == (2, 3) and out["logits"].shape == (2, 8)
    assert "adv_logits" in out
    rec = p.recommend(x, 3)
    assert 1 not in rec[0] and 3 not in rec[1]
    assert advvae.ModelParameters.from_bytes(p.to_bytes()) == p
    with pytest.raises(advvae.Error):
        advvae.ModelParameters.from_bytes(b"garbage")


def test_train_and_attack():
    m = small_matrix()
    fold = advvae.make_folds(m, 3, 1)[0]
    cfg = advvae.ModelConfig()
    cfg.items = m.items
    cfg.encoder_hidden = [12]
    cfg.latent = 6
    tc = advvae.TrainConfig()
    tc.epochs = 2
    tc.batch_size = 16
    result = advvae.train(cfg, m, fold, tc)
    ndcg, recall = advvae.evaluate_ranking(result.selected, m, fold.test_users, fold.test_splits)
    assert 0.0 <= ndcg <= 1.0 and math.isfinite(recall)

    rng = np.random.default_rng(0)
    labels = [i % 2 for i in range(200)]
    latents = rng.normal(size=(200, 4)) + np.array(labels)[:, None] * 4.0
    ac = advvae.AttackerConfig()
    ac.heads = 2
    ac.epochs = 30
    ac.lr = 3e-3
    report = advvae.attack(latents, labels, latents, labels, 2, ac)
    assert report["bacc"] >= 0.9
    assert len(report["head_bacc"]) == 2


def test_cli_exit_code(tmp_path):
    assert advvae.run_cli(["run", "--config", str(tmp_path / "missing.conf")]) == 2
