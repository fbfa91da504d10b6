"""EEG condition decoding: preprocessing, spectral and connectivity features, statistics and LOSO classification"""

__version__ = '1.0.0'
