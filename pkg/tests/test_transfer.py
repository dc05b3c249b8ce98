import numpy as np
import pytest

from edgestorm import attacks, edgenet, synth, transfer
from edgestorm.attacks import AttackConfig
from edgestorm.errors import RejectedInput


@pytest.fixture(scope="module")
def subset(transfer_set):
    return transfer_set[:20]


def test_probabilities_sum_to_one(rng):
    model = transfer.Classifier.init(0)
    probs = model.probabilities(rng.integers(0, 256, (5, 32, 32, 3)))
    assert probs.shape == (5, 3)
    assert np.all(np.abs(probs.sum(axis=1) - 1) <= 1e-9)
    assert model.probabilities(rng.integers(0, 256, (32, 32, 3))).shape == (3,)


def test_untrained_is_near_chance(transfer_set):
    res = transfer.train_classifier(transfer.Classifier.init(3), transfer_set.images[:10], transfer_set.labels[:10], epochs=0)
    assert res.accuracy_trace == []
    acc = np.mean(res.model.predict(transfer_set.images) == transfer_set.labels)
    assert abs(acc - 1 / 3) <= 0.10


def test_default_recipe_accuracy(classifier, transfer_set):
    assert np.mean(classifier.predict(transfer_set.images) == transfer_set.labels) >= 0.9


def test_training_deterministic():
    d = synth.generate_dataset(12, 32, 4)
    a = transfer.train_classifier(transfer.Classifier.init(0), d.images, d.labels, epochs=2, seed=9, batch_size=4)
    b = transfer.train_classifier(transfer.Classifier.init(0), d.images, d.labels, epochs=2, seed=9, batch_size=4)
    for k in a.model.params:
        assert a.model.params[k].tobytes() == b.model.params[k].tobytes()
    assert len(a.accuracy_trace) == 2 and a.loss_trace == b.loss_trace


def test_training_rejects_bad_labels():
    d = synth.generate_dataset(4, 32, 4)
    with pytest.raises(RejectedInput):
        transfer.train_classifier(transfer.Classifier.init(0), d.images, d.labels + 3, epochs=1)
    with pytest.raises(RejectedInput):
        transfer.train_classifier(transfer.Classifier.init(0), d.images, d.labels[:2], epochs=1)


def test_classifier_checkpoint_roundtrip(tmp_path):
    model = transfer.Classifier.init(2)
    model.save(tmp_path / "c.ckpt")
    again = transfer.Classifier.load(tmp_path / "c.ckpt")
    again.save(tmp_path / "d.ckpt")
    assert (tmp_path / "c.ckpt").read_bytes() == (tmp_path / "d.ckpt").read_bytes()


def test_pseudo_ground_truth(edge_model, subset):
    a = edgenet.pseudo_ground_truth(edge_model, subset.images)
    assert set(np.unique(a)) <= {0, 1}
    assert np.array_equal(a, edgenet.pseudo_ground_truth(edge_model, subset.images))
    black = np.zeros((64, 64, 3))
    expected = (edge_model.forward(black).final >= 0.5).astype(np.uint8)
    assert np.array_equal(edgenet.pseudo_ground_truth(edge_model, black), expected)


def test_zero_budget_transfer(edge_model, classifier, subset):
    rep = transfer.transfer_experiment(edge_model, classifier, subset.images, subset.labels, AttackConfig("A", epsilon=0))
    assert rep.clean == rep.attacked == rep.permuted


def test_report_recount(edge_model, classifier, subset):
    cfg = AttackConfig("A", epsilon=16, iterations=3)
    x = subset.images.astype(float)
    adv = transfer.craft_edge_attacks(edge_model, x, cfg)
    rep = transfer.transfer_experiment(edge_model, classifier, x, subset.labels, cfg, adversarial=adv)
    attacked = sum(int(classifier.predict(adv[i]) == subset.labels[i]) for i in range(len(x)))
    permuted = 0
    for i in range(len(x)):
        noise = attacks.permute_perturbation(adv[i] - x[i], transfer.permutation_rng(cfg.seed, i))
        permuted += int(classifier.predict(np.clip(x[i] + noise, 0, 255)) == subset.labels[i])
    assert rep.attacked == attacked / len(x)
    assert rep.permuted == permuted / len(x)
    assert rep.clean == np.mean(classifier.predict(x) == subset.labels)
    assert set(rep.as_dict()) >= {"clean", "attacked", "permuted", "n_images", "variant", "epsilon"}


def test_attack_only_sees_edge_model(edge_model, subset):
    # the crafted images do not depend on which classifier is scored afterwards
    cfg = AttackConfig("S", epsilon=8, iterations=2)
    x = subset.images[:4].astype(float)
    a = transfer.craft_edge_attacks(edge_model, x, cfg)
    r1 = transfer.transfer_experiment(edge_model, transfer.Classifier.init(0), x, subset.labels[:4], cfg, adversarial=a)
    r2 = transfer.transfer_experiment(edge_model, transfer.Classifier.init(1), x, subset.labels[:4], cfg)
    assert np.array_equal(a, transfer.craft_edge_attacks(edge_model, x, cfg))
    assert r1.n_images == r2.n_images == 4


def test_class_mismatch(edge_model, subset):
    two = transfer.Classifier.init(0, n_classes=2)
    labels = np.full(len(subset), 2)
    with pytest.raises(RejectedInput):
        transfer.transfer_experiment(edge_model, two, subset.images, labels, AttackConfig("A", epsilon=0))


def test_reverse_zero_budget(edge_model, classifier, subset):
    rep = transfer.reverse_transfer_check(classifier, edge_model, subset.images, subset.edges, AttackConfig(epsilon=0))
    assert rep.f_clean == rep.f_attacked and rep.delta == 0


def test_reverse_deterministic(edge_model, classifier, subset):
    cfg = AttackConfig(epsilon=8, iterations=2)
    a = transfer.reverse_transfer_check(classifier, edge_model, subset.images[:6], subset.edges[:6], cfg)
    b = transfer.reverse_transfer_check(classifier, edge_model, subset.images[:6], subset.edges[:6], cfg)
    assert a == b


def test_classifier_attack_respects_budget(classifier, subset):
    x = subset.images[:6].astype(float)
    adv, labels = transfer.attack_classifier(classifier, x, AttackConfig(epsilon=4, iterations=3))
    assert np.all(np.abs(adv - x) <= 4) and np.all((adv >= 0) & (adv <= 255))
    assert np.array_equal(labels, classifier.predict(x))
