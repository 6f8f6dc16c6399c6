"""Long-video multiple-choice question answering.

Builds a shot-structured hierarchical tree over frame embeddings, captions
retrieved frames with question-intent prompts, and answers questions
through an adaptively planned multi-agent workflow with weighted evidence
fusion.
"""

__version__ = "0.1.0"
