"""opscan: EVM opcode-sequence vulnerability classifier.

Pipeline: disassemble runtime bytecode to opcode tokens, pretrain a
next-opcode LSTM language model, transfer its encoder into a 4-class
contract classifier, fine-tune gradually, evaluate.
"""

__version__ = "0.1.0"
