"""Sign-gradient adversarial attacks on convolutional EEG classifiers, in numpy."""

__version__ = "0.1.0"
