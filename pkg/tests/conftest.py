import numpy as np
import pytest

from signal_ingest import PREPARED_RATE, Waveform, Window


@pytest.fixture
def make_window():
    """Factory for a 3.75 s window at 4 kHz built from a sample array or callable of t."""
    def _make(signal=None, offset: float = 0.0) -> Window:
        n = int(round(3.75 * PREPARED_RATE))
        t = np.arange(n) / PREPARED_RATE
        if signal is None:
            samples = np.zeros(n)
        elif callable(signal):
            samples = np.asarray(signal(t), dtype=np.float64)
        else:
            samples = np.asarray(signal, dtype=np.float64)
        return Window(samples=samples, rate=PREPARED_RATE, origin_offset=offset)
    return _make


@pytest.fixture
def waveform_of():
    def _make(duration_s: float, rate: float = PREPARED_RATE, fn=None) -> Waveform:
        n = int(round(duration_s * rate))
        t = np.arange(n) / rate
        return Waveform(samples=np.zeros(n) if fn is None else fn(t), rate=rate)
    return _make


@pytest.fixture
def tiny_model_cfg():
    from model_han import HanConfig

    return HanConfig(
        variant="full", channels=2, height=4, width=4, conv_filters=(3, 4),
        lstm_hidden=5, attention_units=4, embedding_dim=8, spatial_dropout=0.0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
