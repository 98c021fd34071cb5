"""Account bookkeeping."""

import json


class InsufficientFunds(Exception):
    pass


class Account:
    def __init__(self, owner, balance=0):
        self.owner = owner
        self.balance = balance
        self.history = []

    def deposit(self, amount):
        if amount <= 0:
            raise ValueError("deposit must be positive")
        self.balance += amount
        self.history.append(("deposit", amount))

    def withdraw(self, amount):
        if amount > self.balance:
            raise InsufficientFunds(self.owner)
        self.balance -= amount
        self.history.append(("withdraw", amount))


class Ledger:
    def __init__(self):
        self.accounts = {}

    def open(self, owner):
        account = Account(owner)
        self.accounts[owner] = account
        return account

    def transfer(self, src, dst, amount):
        try:
            self.accounts[src].withdraw(amount)
        except KeyError:
            raise ValueError(f"unknown account {src}")
        except InsufficientFunds:
            return False
        self.accounts[dst].deposit(amount)
        return True

    def dump(self):
        return json.dumps({k: v.balance for k, v in self.accounts.items()}, sort_keys=True)
