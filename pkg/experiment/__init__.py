# Experiment package
