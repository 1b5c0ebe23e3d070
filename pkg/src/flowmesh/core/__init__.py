"""Workflow model handling, storage, tool execution and the dataflow engine."""
