# Toolkit Schemas
