"""Smoke test for the mstnet extension module.

Build and install first, e.g. `maturin develop --release -m crates/python/Cargo.toml`.
"""

import math
import os
import tempfile

import mstnet


def main():
    cfg = mstnet.Config("tiny", epochs=2)
    assert cfg.get("epochs") == "2"
    assert "lr" in mstnet.Config.keys()

    train = mstnet.Corpus.synth(8, vocab_size=3, d_in=4)
    dev = mstnet.Corpus.synth(4, vocab_size=3, d_in=4, start=100)
    assert len(train) == 8
    frames, target = train.sample(0)
    assert len(frames[0]) == 4 and all(0 <= g < 3 for g in target)

    net = mstnet.Network(cfg)
    levels = net.level_logits(frames)
    assert len(levels) == 4
    assert all(len(rows[0]) == 4 for rows, _ in levels)
    assert math.isfinite(net.loss(frames, target))
    net.decode(frames, beam_width=3)

    trainer = mstnet.Trainer(cfg)
    for _ in range(2):
        epoch, loss, dev_wer, lr = trainer.run_epoch(train, dev)
        print(f"epoch {epoch} loss {loss:.3f} dev WER {dev_wer:.1f}% lr {lr}")
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        trainer.save(path)
        restored = mstnet.Network.load(path)
        assert restored.decode(frames) == trainer.network().decode(frames)
        wer, lines = restored.evaluate(dev, beam_width=0)
        print(lines.splitlines()[-1])

    logits = [[0.0, 0.0, 0.0]]
    assert abs(mstnet.ctc_loss(logits, [0]) - math.log(3)) < 1e-12
    assert mstnet.collapse([2, 0, 0, 2, 1, 1, 2], blank=2) == [0, 1]
    assert mstnet.greedy([[0.0, 1.0, 0.0], [0.0, 0.0, 5.0]]) == [1]
    best, log_prob = mstnet.beam([[0.0, 1.0, 0.0]], 4)[0]
    assert best == [1] and log_prob < 0
    assert mstnet.wer([0, 1, 2], [0, 2])[:4] == (100 / 3, 0, 1, 0)

    ok, report = mstnet.gradcheck(mstnet.Config("tiny"))
    assert ok, report

    try:
        mstnet.Config(lr="fast")
    except ValueError:
        pass
    else:
        raise AssertionError("bad config value accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
