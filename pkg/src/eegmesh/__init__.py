"""Motor-imagery EEG action recognition and user identification with a mesh
CNN + Bi-LSTM network."""

__version__ = "0.1.0"
