import numpy as np
import pytest

from modeltrace import acpt, media, pcpt, synth, tinynn
from modeltrace.tinynn import TrainConfig, conv2d, dense, max_pool, relu

NUM_CLASSES = 10
INPUT_SHAPE = (3, 16, 16)
TRIGGERS_PER_USER = 40


def small_layers(num_classes: int = NUM_CLASSES):
    return (conv2d(4, 3), relu(), max_pool(2), dense(32), relu(), dense(num_classes))


@pytest.fixture(scope="session")
def train_data():
    return synth.grid_patches(1000, NUM_CLASSES, size=16, channels=3, seed=0)


@pytest.fixture(scope="session")
def test_data():
    return synth.grid_patches(400, NUM_CLASSES, size=16, channels=3, seed=1)


@pytest.fixture(scope="session")
def base_model(train_data):
    model = tinynn.init_model(small_layers(), INPUT_SHAPE, NUM_CLASSES, seed=0)
    return tinynn.train(model, train_data, TrainConfig(epochs=15, seed=0))


@pytest.fixture(scope="session")
def alice_triggers():
    video = synth.tinted_video(160, tint="red", seed=10, style="bright")
    return media.select_triggers(video, TRIGGERS_PER_USER, user_id="Alice", label=NUM_CLASSES)


@pytest.fixture(scope="session")
def bob_triggers():
    video = synth.tinted_video(160, tint="blue", seed=11, style="dark")
    return media.select_triggers(video, TRIGGERS_PER_USER, user_id="Bob", label=NUM_CLASSES)


@pytest.fixture(scope="session")
def alice_model(base_model, train_data, alice_triggers):
    cfg = TrainConfig(epochs=50, seed=1)
    return pcpt.embed_watermark(base_model, train_data, alice_triggers, cfg).model


@pytest.fixture(scope="session")
def bob_model(base_model, train_data, bob_triggers):
    cfg = TrainConfig(epochs=50, seed=2)
    return pcpt.embed_watermark(base_model, train_data, bob_triggers, cfg).model


# ACPT desk fixture

@pytest.fixture(scope="session")
def key_pools():
    return {
        "apple": synth.key_images("apple", 80, seed=20),
        "rabbit": synth.key_images("rabbit", 80, seed=21),
        "other": synth.key_images("other", 80, seed=22),
    }


def _detector(keys, others, seed):
    return acpt.train_detector(keys, others, TrainConfig(epochs=40, seed=seed))


@pytest.fixture(scope="session")
def alice_detector(key_pools):
    # first 60 of each pool train, the remaining 20 are held out
    return _detector(key_pools["apple"][:60], key_pools["rabbit"][:30] + key_pools["other"][:30], 3)


@pytest.fixture(scope="session")
def bob_detector(key_pools):
    return _detector(key_pools["rabbit"][:60], key_pools["apple"][:30] + key_pools["other"][:30], 4)


@pytest.fixture(scope="session")
def acpt_users(key_pools, alice_detector, bob_detector):
    """Alice holds the apple key class, Bob the rabbit key class; both enrolled in one Q."""
    alice_cred = acpt.make_credential("alice", "HN", range(8))
    bob_cred = acpt.make_credential("bob", "HN", (63, 1, 17, 5, 42, 8, 30, 11))
    alice_key, bob_key = key_pools["apple"][0], key_pools["rabbit"][0]
    base = acpt.IdentityBase()
    base = acpt.enroll(base, alice_cred, alice_key, "Alice")
    base = acpt.enroll(base, bob_cred, bob_key, "Bob")
    bundles = {
        "Alice": acpt.UserKeyBundle("Alice", (alice_key,), alice_detector, alice_cred),
        "Bob": acpt.UserKeyBundle("Bob", (bob_key,), bob_detector, bob_cred),
    }
    return base, bundles


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
