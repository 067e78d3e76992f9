# Toolkit Services
