"""Privacy-preserving patient-clustered federated learning simulator."""
