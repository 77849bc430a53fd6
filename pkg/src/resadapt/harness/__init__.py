"""
Experiment harness: TOML configs, run directories, the experiment runners and
the ``resadapt`` command line.

Two configs ship with the package: ``desk`` (the reproduction scale) and
``smoke`` (seconds-scale, for tests and quick checks).
"""
