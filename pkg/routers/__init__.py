# Mock LLM Router
