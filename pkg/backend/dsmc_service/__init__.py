"""Direct-simulation Monte Carlo for the forced inelastic hard-sphere gas."""
