"""Numerical modules: Bloch cell spectra, beam dynamics, wave fields and the split-step reference."""
