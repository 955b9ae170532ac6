"""Multi-static ISAC sensing over shared OFDM frames."""
